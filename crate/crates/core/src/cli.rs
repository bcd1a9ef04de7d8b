//! The `flowkan` command line: reproducible pipelines from data generation
//! to symbolic distillation, each writing a manifest next to its outputs.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineConfig, BaselineModel};
use crate::datagen::{desk_scale_split, generate_range, raw_feature_table, ScenarioConfig};
use crate::error::{FlowKanError, Result};
use crate::featsel::{sfs, SelectionReport, SfsConfig};
use crate::flowkanet::{FlowKanConfig, FlowKanModel};
use crate::model::{AnyModel, Predictor, Preprocess, CHECKPOINT_FORMAT};
use crate::netgraph::{load_dataset, save_dataset, FeatureSelection, HeteroGraph, FLOW_FEATURES};
use crate::symdistill::{distill_all, export_equations, load_equations, write_trace_csv, DistillConfig, EQUATIONS_FORMAT};
use crate::trainer::{collect_predictions, mse, r2, random_search, split_train_val, train, SearchSpace, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "flowkan", version, about = "Flow delay prediction with spline-operator GNNs and symbolic surrogates")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labeled synthetic train/test datasets.
    Datagen(DatagenArgs),
    /// Sequential forward feature selection on a dataset.
    Featsel(FeatselArgs),
    /// Train the attention-GNN baseline.
    TrainBaseline(TrainArgs),
    /// Train FlowKANet.
    TrainFlowkan(TrainArgs),
    /// Seeded random hyperparameter search for FlowKANet.
    Search(SearchArgs),
    /// Distill a FlowKANet checkpoint into closed-form equations.
    Distill(DistillArgs),
    /// Evaluate checkpoints or equation bundles on a dataset.
    Eval(EvalArgs),
    /// Summarize every run found under a directory.
    Report(ReportArgs),
    /// Re-execute the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Total graphs, split 80/20 into train/test. Without it: 250 train, 60 test.
    #[arg(long)]
    pub graphs: Option<usize>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// TOML file with scenario parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeatselArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 16)]
    pub max_features: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Selection file written by `featsel`; all 16 features otherwise.
    #[arg(long)]
    pub selection: Option<PathBuf>,
    /// TOML file with model hyperparameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 150)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.002)]
    pub lr: f64,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub selection: Option<PathBuf>,
    /// TOML file overriding the search space.
    #[arg(long)]
    pub space: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub budget: usize,
    /// Epoch cap per trial.
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training graphs; the validation share is split off as in training.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with distillation settings (flags below take precedence).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint or equation bundle; repeat to compare several models.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory whose immediate subdirectories hold run outputs.
    #[arg(long)]
    pub dir: PathBuf,
    /// Defaults to `<dir>/report.md`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to re-execute a command and audit what it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    /// Resolved configuration actually used.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FlowKanError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| FlowKanError::parse(path.display().to_string(), e.to_string()))
    }
}

/// What a command produced, before the manifest is written.
struct Outcome {
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FlowKanError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| FlowKanError::io(path, e))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| FlowKanError::io(path, e))?;
    toml::from_str(&text).map_err(|e| FlowKanError::parse(path.display().to_string(), e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| FlowKanError::parse(path.display().to_string(), e.to_string()))?;
    write_file(path, text + "\n")
}

fn load_selection(path: Option<&Path>) -> Result<FeatureSelection> {
    match path {
        None => Ok(FeatureSelection::all()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| FlowKanError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| FlowKanError::parse(p.display().to_string(), e.to_string()))
        }
    }
}

fn cmd_datagen(a: &DatagenArgs) -> Result<Outcome> {
    let cfg: ScenarioConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => ScenarioConfig::default(),
    };
    cfg.validate()?;
    let (train_g, test_g) = match a.graphs {
        None => desk_scale_split(&cfg, a.seed)?,
        Some(n) => {
            let n_train = (0.8 * n as f64).round() as usize;
            (generate_range(&cfg, 0..n_train, a.seed)?, generate_range(&cfg, n_train..n, a.seed)?)
        }
    };
    ensure_dir(&a.out)?;
    let train_p = a.out.join("train.jsonl");
    let test_p = a.out.join("test.jsonl");
    save_dataset(&train_g, &train_p)?;
    save_dataset(&test_g, &test_p)?;
    info!("wrote {} train / {} test graphs", train_g.len(), test_g.len());
    Ok(Outcome {
        config: serde_json::json!({ "scenario": cfg, "train_graphs": train_g.len(), "test_graphs": test_g.len() }),
        seed: Some(a.seed),
        inputs: a.config.iter().cloned().collect(),
        outputs: vec![train_p, test_p],
    })
}

fn cmd_featsel(a: &FeatselArgs) -> Result<Outcome> {
    let graphs = load_dataset(&a.data)?;
    let table = raw_feature_table(&graphs, a.seed)?;
    let cfg = SfsConfig {
        folds: a.folds,
        seed: a.seed,
        tolerance: a.tolerance,
        max_features: a.max_features,
    };
    let result = sfs(&table.rows, &table.target, &cfg)?;
    let report = SelectionReport::new(&result, &table.names);
    let kept: Vec<String> = report
        .names
        .iter()
        .filter(|n| FLOW_FEATURES.contains(&n.as_str()))
        .cloned()
        .collect();
    if kept.len() < report.names.len() {
        log::warn!("dropping selected distractor columns from the selection file");
    }
    if kept.is_empty() {
        return Err(FlowKanError::Validation("no model feature was selected".into()));
    }
    let selection = FeatureSelection::from_names(kept)?;
    ensure_dir(&a.out)?;
    let text_p = a.out.join("selection.txt");
    let json_p = a.out.join("selection.json");
    write_file(&text_p, report.to_text())?;
    write_json(&json_p, &selection)?;
    Ok(Outcome {
        config: to_value(&cfg),
        seed: Some(a.seed),
        inputs: vec![a.data.clone()],
        outputs: vec![text_p, json_p],
    })
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        lr: a.lr,
        max_epochs: a.epochs,
        patience: a.patience,
        seed: a.seed,
        val_fraction: a.val_fraction,
    }
}

fn cmd_train(a: &TrainArgs, flowkan: bool) -> Result<Outcome> {
    let graphs = load_dataset(&a.train)?;
    let tc = train_config(a);
    tc.validate()?;
    let (tr, va) = split_train_val(&graphs, tc.val_fraction, tc.seed);
    let selection = load_selection(a.selection.as_deref())?;
    let pre = Preprocess::fit(&tr, selection)?;
    let (model, history, model_cfg): (AnyModel, _, _) = if flowkan {
        let cfg: FlowKanConfig = match &a.config {
            Some(p) => read_toml(p)?,
            None => FlowKanConfig::default(),
        };
        let mut m = FlowKanModel::new(cfg.clone(), pre, tc.seed)?;
        let h = train(&mut m, &tr, &va, &tc)?;
        (m.into(), h, to_value(&cfg))
    } else {
        let cfg: BaselineConfig = match &a.config {
            Some(p) => read_toml(p)?,
            None => BaselineConfig::default(),
        };
        let mut m = BaselineModel::new(cfg.clone(), pre, tc.seed)?;
        let h = train(&mut m, &tr, &va, &tc)?;
        (m.into(), h, to_value(&cfg))
    };
    info!(
        "best epoch {} of {}, validation mse {:.4} ms^2",
        history.best_epoch,
        history.epochs.len(),
        history.best_val_mse
    );
    ensure_dir(&a.out)?;
    let ck = a.out.join("checkpoint.json");
    let hist = a.out.join("history.csv");
    model.save(&ck)?;
    history.save_csv(&hist)?;
    let mut inputs = vec![a.train.clone()];
    inputs.extend(a.selection.iter().cloned());
    inputs.extend(a.config.iter().cloned());
    Ok(Outcome {
        config: serde_json::json!({ "model": model_cfg, "train": tc, "param_count": model.as_trainable().param_count() }),
        seed: Some(a.seed),
        inputs,
        outputs: vec![ck, hist],
    })
}

fn cmd_search(a: &SearchArgs) -> Result<Outcome> {
    let graphs = load_dataset(&a.train)?;
    let space: SearchSpace = match &a.space {
        Some(p) => read_toml(p)?,
        None => SearchSpace::default(),
    };
    let (tr, va) = split_train_val(&graphs, a.val_fraction, a.seed);
    let selection = load_selection(a.selection.as_deref())?;
    let pre = Preprocess::fit(&tr, selection)?;
    let mut objective = |c: &crate::trainer::Candidate, seed: u64| -> Result<f64> {
        let tc = TrainConfig {
            lr: c.lr,
            max_epochs: a.epochs,
            patience: a.patience,
            seed,
            val_fraction: a.val_fraction,
        };
        let mut m = FlowKanModel::new(c.config.clone(), pre.clone(), seed)?;
        Ok(train(&mut m, &tr, &va, &tc)?.best_val_mse)
    };
    let result = random_search(&space, a.budget, a.seed, &mut objective)?;
    ensure_dir(&a.out)?;
    let log_p = a.out.join("search_log.csv");
    let best_p = a.out.join("best_config.toml");
    let mut buf = Vec::new();
    result.write_csv(&mut buf)?;
    write_file(&log_p, buf)?;
    let best = toml::to_string(&result.best.config).map_err(|e| FlowKanError::parse("best config", e.to_string()))?;
    write_file(
        &best_p,
        format!(
            "# trial {} validation mse {:.4} ms^2, learning rate {}\n{best}",
            result.best_trial, result.best_val_mse, result.best.lr
        ),
    )?;
    let mut inputs = vec![a.train.clone()];
    inputs.extend(a.space.iter().cloned());
    Ok(Outcome {
        config: serde_json::json!({ "space": space, "budget": a.budget, "epochs": a.epochs, "patience": a.patience }),
        seed: Some(a.seed),
        inputs,
        outputs: vec![log_p, best_p],
    })
}

fn cmd_distill(a: &DistillArgs) -> Result<Outcome> {
    let model = match AnyModel::load(&a.checkpoint)? {
        AnyModel::Flowkan(m) => m,
        AnyModel::Baseline(_) => {
            return Err(FlowKanError::config("distillation needs a FlowKANet checkpoint, got a baseline"));
        }
    };
    let mut cfg: DistillConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => DistillConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(g) = a.gamma {
        cfg.gamma = g;
    }
    cfg.validate()?;
    let graphs = load_dataset(&a.train)?;
    let (tr, va) = split_train_val(&graphs, a.val_fraction, a.seed);
    let out = distill_all(&model, &tr, &va, &cfg)?;
    ensure_dir(&a.out)?;
    let files = export_equations(&out.surrogate, &a.out)?;
    let trace_p = a.out.join("trace.csv");
    let mut buf = Vec::new();
    write_trace_csv(&out.trace, &mut buf)?;
    write_file(&trace_p, buf)?;
    let report_p = a.out.join("distill_report.json");
    write_json(
        &report_p,
        &serde_json::json!({
            "neural_mse_ms2": out.neural_mse_ms2,
            "constants": out.surrogate.constant_count(),
            "trainable_params": out.surrogate.trainable_param_count(),
            "blocks": out.reports,
        }),
    )?;
    let mut inputs = vec![a.checkpoint.clone(), a.train.clone()];
    inputs.extend(a.config.iter().cloned());
    Ok(Outcome {
        config: serde_json::json!({ "distill": cfg, "val_fraction": a.val_fraction }),
        seed: Some(a.seed),
        inputs,
        outputs: vec![files.text, files.json, trace_p, report_p],
    })
}

/// A model loaded for evaluation: either neural tier or a surrogate.
pub enum Evaluated {
    Neural(AnyModel),
    Symbolic(crate::symdistill::SymbolicModel),
}

impl Evaluated {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FlowKanError::io(path, e))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| FlowKanError::parse(path.display().to_string(), e.to_string()))?;
        match v.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => Ok(Evaluated::Neural(AnyModel::load(path)?)),
            Some(EQUATIONS_FORMAT) => Ok(Evaluated::Symbolic(load_equations(path)?)),
            other => Err(FlowKanError::parse(
                path.display().to_string(),
                format!("not a checkpoint or equation bundle (format {other:?})"),
            )),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Evaluated::Neural(m) => m.kind(),
            Evaluated::Symbolic(_) => "surrogate",
        }
    }

    pub fn predictor(&self) -> &dyn Predictor {
        match self {
            Evaluated::Neural(m) => m,
            Evaluated::Symbolic(s) => s,
        }
    }

    pub fn trainable_params(&self) -> usize {
        match self {
            Evaluated::Neural(m) => m.as_trainable().param_count(),
            Evaluated::Symbolic(s) => s.trainable_param_count(),
        }
    }

    pub fn constants(&self) -> Option<usize> {
        match self {
            Evaluated::Neural(_) => None,
            Evaluated::Symbolic(s) => Some(s.constant_count()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub kind: String,
    pub mse_ms2: f64,
    pub r2: f64,
    pub flows: usize,
    pub trainable_params: usize,
    pub constants: Option<usize>,
}

pub fn eval_text(rows: &[EvalRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model\tkind\tmse_ms2\tr2\tflows\ttrainable_params\tconstants");
    for r in rows {
        let consts = r.constants.map_or("-".to_string(), |c| c.to_string());
        let _ = writeln!(
            s,
            "{}\t{}\t{:.4}\t{:.4}\t{}\t{}\t{}",
            r.model, r.kind, r.mse_ms2, r.r2, r.flows, r.trainable_params, consts
        );
    }
    let find = |k: &str| rows.iter().find(|r| r.kind == k);
    if let (Some(b), Some(f)) = (find("baseline"), find("flowkan")) {
        let _ = writeln!(
            s,
            "\nparameters: baseline {} flowkan {} ratio flowkan/baseline {:.4} ({:.4}x fewer)",
            b.trainable_params,
            f.trainable_params,
            f.trainable_params as f64 / b.trainable_params as f64,
            b.trainable_params as f64 / f.trainable_params as f64
        );
    }
    s
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let graphs: Vec<HeteroGraph> = load_dataset(&a.data)?;
    ensure_dir(&a.out)?;
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for (i, path) in a.models.iter().enumerate() {
        let m = Evaluated::load(path)?;
        let p = m.predictor();
        let inputs = p.preprocess().prepare_all(&graphs)?;
        let (pred, truth) = collect_predictions(p, &inputs)?;
        let scatter = a.out.join(format!("scatter_{i}_{}.csv", m.kind()));
        let mut w = csv::Writer::from_path(&scatter).map_err(|e| FlowKanError::parse("scatter csv", e.to_string()))?;
        let err = |e: csv::Error| FlowKanError::parse("scatter csv", e.to_string());
        w.write_record(["true", "predicted"]).map_err(err)?;
        for (t, y) in truth.iter().zip(&pred) {
            w.write_record([t.to_string(), y.to_string()]).map_err(err)?;
        }
        w.flush().map_err(|e| FlowKanError::io(&scatter, e))?;
        outputs.push(scatter);
        rows.push(EvalRow {
            model: path.display().to_string(),
            kind: m.kind().into(),
            mse_ms2: mse(&pred, &truth)?,
            r2: r2(&pred, &truth)?,
            flows: pred.len(),
            trainable_params: m.trainable_params(),
            constants: m.constants(),
        });
    }
    let text_p = a.out.join("report.txt");
    let json_p = a.out.join("metrics.json");
    write_file(&text_p, eval_text(&rows))?;
    write_json(&json_p, &rows)?;
    outputs.extend([text_p, json_p]);
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.models.iter().cloned());
    Ok(Outcome {
        config: serde_json::json!({ "units": "milliseconds" }),
        seed: None,
        inputs,
        outputs,
    })
}

fn cmd_report(a: &ReportArgs) -> Result<Outcome> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(&a.dir)
        .map_err(|e| FlowKanError::io(&a.dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    let mut s = String::from("# flowkan run report\n");
    let mut inputs = Vec::new();
    for d in &dirs {
        let mp = d.join(MANIFEST_FILE);
        let m = RunManifest::load(&mp)?;
        inputs.push(mp);
        let _ = writeln!(s, "\n## {} ({})\n", d.display(), m.command);
        let _ = writeln!(s, "- seed: {}", m.seed.map_or("-".into(), |v| v.to_string()));
        let _ = writeln!(s, "- wall clock: {:.1} s", m.wall_clock_secs);
        for o in &m.outputs {
            let _ = writeln!(s, "- output: {o}");
        }
        for extra in ["report.txt", "selection.txt"] {
            if let Ok(text) = fs::read_to_string(d.join(extra)) {
                let _ = writeln!(s, "\n```\n{}```", text);
            }
        }
        if let Ok(text) = fs::read_to_string(d.join("trace.csv")) {
            let _ = writeln!(s, "\nprogressive hybrid trace:\n\n```\n{text}```");
        }
    }
    let out = a.out.clone().unwrap_or_else(|| a.dir.join("report.md"));
    write_file(&out, s)?;
    Ok(Outcome {
        config: serde_json::json!({ "runs": dirs.len() }),
        seed: None,
        inputs,
        outputs: vec![out],
    })
}

fn out_dir(command: &Command) -> Option<&Path> {
    match command {
        Command::Datagen(a) => Some(&a.out),
        Command::Featsel(a) => Some(&a.out),
        Command::TrainBaseline(a) | Command::TrainFlowkan(a) => Some(&a.out),
        Command::Search(a) => Some(&a.out),
        Command::Distill(a) => Some(&a.out),
        Command::Eval(a) => Some(&a.out),
        Command::Report(a) => a.out.as_deref().and_then(Path::parent).or(Some(&a.dir)),
        Command::Rerun(_) => None,
    }
}

fn name(command: &Command) -> &'static str {
    match command {
        Command::Datagen(_) => "datagen",
        Command::Featsel(_) => "featsel",
        Command::TrainBaseline(_) => "train-baseline",
        Command::TrainFlowkan(_) => "train-flowkan",
        Command::Search(_) => "search",
        Command::Distill(_) => "distill",
        Command::Eval(_) => "eval",
        Command::Report(_) => "report",
        Command::Rerun(_) => "rerun",
    }
}

fn dispatch(command: &Command) -> Result<Outcome> {
    match command {
        Command::Datagen(a) => cmd_datagen(a),
        Command::Featsel(a) => cmd_featsel(a),
        Command::TrainBaseline(a) => cmd_train(a, false),
        Command::TrainFlowkan(a) => cmd_train(a, true),
        Command::Search(a) => cmd_search(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Rerun(_) => unreachable!("rerun is resolved before dispatch"),
    }
}

/// Replaces (or appends) the value of `--out` in a recorded argument list.
fn with_out(args: &[String], out: &Path) -> Vec<String> {
    let mut v = args.to_vec();
    let out = out.display().to_string();
    if let Some(i) = v.iter().position(|a| a == "--out") {
        if i + 1 < v.len() {
            v[i + 1] = out;
            return v;
        }
    }
    if let Some(i) = v.iter().position(|a| a.starts_with("--out=")) {
        v[i] = format!("--out={out}");
        return v;
    }
    v.extend(["--out".to_string(), out]);
    v
}

/// Executes one parsed command line and writes its manifest.
pub fn execute(args: Vec<String>) -> Result<RunManifest> {
    let argv = std::iter::once("flowkan".to_string()).chain(args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| FlowKanError::config(e.to_string()))?;
    if let Command::Rerun(r) = &cli.command {
        let m = RunManifest::load(&r.manifest)?;
        let recorded = match &r.out {
            Some(o) => with_out(&m.args, o),
            None => m.args.clone(),
        };
        return execute(recorded);
    }
    let start = Instant::now();
    let outcome = dispatch(&cli.command)?;
    let manifest = RunManifest {
        command: name(&cli.command).into(),
        args,
        config: outcome.config,
        seed: outcome.seed,
        inputs: outcome.inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir(&cli.command) {
        ensure_dir(dir)?;
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    }
    Ok(manifest)
}

/// Process entry point: returns the exit code.
pub fn main_with_args(argv: impl IntoIterator<Item = OsString>) -> i32 {
    let argv: Vec<String> = argv.into_iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match execute(argv.into_iter().skip(1).collect()) {
        Ok(m) => {
            for o in &m.outputs {
                println!("{o}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
