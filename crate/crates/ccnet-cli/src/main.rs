//! `ccn`: operator surface for the EEG-to-mel decoder.
//!
//! Subcommands: `synth`, `train`, `predict`, `ensemble`, `eval`, `gradcheck`.
//! Machine-readable JSON goes to stdout, progress to stderr. Outputs are
//! written to a temporary sibling path and renamed into place on success, so
//! a failed run leaves no partial artifacts.
//!
//! Exit codes: 0 ok, 1 check failure, 2 usage, 3 I/O, 4 empty split,
//! 5 checkpoint format, 6 alignment.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ccnet::checkpoint::{self, CheckpointError, CheckpointMeta};
use ccnet::data::{self, DataError, FoldSpec, SynthSpec};
use ccnet::eval::{self, EvalError, Prediction};
use ccnet::gradcheck;
use ccnet::hash::{fnv1a64, hex64};
use ccnet::model::{build_model, ModelConfig, ModelError};
use ccnet::train::{self, TrainError, TrainSpec};

const EXIT_CHECK_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_EMPTY_SPLIT: u8 = 4;
const EXIT_CHECKPOINT: u8 = 5;
const EXIT_ALIGNMENT: u8 = 6;

#[derive(Parser)]
#[command(name = "ccn", version, about = "EEG-to-mel decoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset of EEG/mel recordings.
    Synth(SynthArgs),
    /// Train one model on one cross-validation fold.
    Train(TrainArgs),
    /// Run a checkpoint over a dataset, writing raw predictions.
    Predict(PredictArgs),
    /// Normalize and average several prediction sets.
    Ensemble(EnsembleArgs),
    /// Score predictions against their dataset's mel targets.
    Eval(EvalArgs),
    /// Run the finite-difference gradient check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of subjects
    #[arg(long)]
    subjects: usize,
    /// Recordings per subject
    #[arg(long = "per-subject")]
    per_subject: usize,
    /// Samples per recording (64 Hz)
    #[arg(long = "T")]
    t_samples: usize,
    #[arg(long)]
    seed: u64,
    /// EEG noise level in dB; "inf" disables noise
    #[arg(long = "snr-db", default_value = "inf")]
    snr_db: f64,
    #[arg(long = "lag-taps", default_value_t = 4)]
    lag_taps: usize,
    /// Output dataset directory (must not exist)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Built-in fold number 1..4 (or use --fold-file)
    #[arg(long, conflicts_with = "fold_file")]
    fold: Option<u32>,
    /// JSON file holding a custom fold spec
    #[arg(long = "fold-file")]
    fold_file: Option<PathBuf>,
    /// Seed for both model init and batch shuffling
    #[arg(long)]
    seed: u64,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// JSON config file with "model" and "train" sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint path (must not exist)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output prediction directory (must not exist)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Member prediction directories (repeat the flag)
    #[arg(long = "preds", required = true)]
    preds: Vec<PathBuf>,
    /// Output prediction directory (must not exist)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random shapes per op
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Corrupt the analytic gradients by 1% (detector sanity harness)
    #[arg(long, hide = true)]
    corrupt: bool,
}

struct CmdError {
    code: u8,
    msg: String,
}

impl CmdError {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        CmdError {
            code,
            msg: msg.into(),
        }
    }

    fn usage(msg: impl Into<String>) -> Self {
        CmdError::new(EXIT_USAGE, msg)
    }

    fn io(msg: impl Into<String>) -> Self {
        CmdError::new(EXIT_IO, msg)
    }
}

impl From<DataError> for CmdError {
    fn from(e: DataError) -> Self {
        let code = match &e {
            DataError::EmptySplit { .. } => EXIT_EMPTY_SPLIT,
            DataError::BadFold(_) | DataError::BadSpec(_) | DataError::ZeroHop => EXIT_USAGE,
            _ => EXIT_IO,
        };
        CmdError::new(code, e.to_string())
    }
}

impl From<CheckpointError> for CmdError {
    fn from(e: CheckpointError) -> Self {
        CmdError::new(EXIT_CHECKPOINT, e.to_string())
    }
}

impl From<EvalError> for CmdError {
    fn from(e: EvalError) -> Self {
        CmdError::new(EXIT_ALIGNMENT, e.to_string())
    }
}

impl From<ModelError> for CmdError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(msg) => CmdError::usage(msg),
            other => CmdError::io(other.to_string()),
        }
    }
}

impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(msg) => CmdError::usage(msg),
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            other => CmdError::io(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // clap exits with code 2 on usage errors
    let result = match cli.command {
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Predict(args) => cmd_predict(args),
        Cmd::Ensemble(args) => cmd_ensemble(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

/// Prints to stdout, ignoring a closed pipe (e.g. piping into `head`).
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Run provenance written next to every produced artifact.
#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    config: serde_json::Value,
    seed: Option<u64>,
    fold_id: Option<u32>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started_unix: f64,
    finished_unix: f64,
    /// FNV-1a 64 per produced file, keyed by path relative to the output root.
    artifact_fnv64: BTreeMap<String, String>,
}

fn hash_file(path: &Path) -> Result<String, CmdError> {
    let bytes = fs::read(path).map_err(|e| CmdError::io(format!("{}: {e}", path.display())))?;
    Ok(hex64(fnv1a64(&bytes)))
}

/// Hashes every file under `dir` (recursively), keyed by relative path.
fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>, CmdError> {
    fn walk(
        root: &Path,
        dir: &Path,
        out: &mut BTreeMap<String, String>,
    ) -> Result<(), CmdError> {
        let entries =
            fs::read_dir(dir).map_err(|e| CmdError::io(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).collect();
        paths.sort();
        for p in paths {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hash_file(&p)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// Temporary sibling path for atomic writes.
fn staging_path(target: &Path) -> PathBuf {
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    target.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

fn require_fresh(target: &Path) -> Result<(), CmdError> {
    if target.exists() {
        return Err(CmdError::io(format!(
            "output path {} already exists",
            target.display()
        )));
    }
    Ok(())
}

fn commit_staging(staging: &Path, target: &Path) -> Result<(), CmdError> {
    fs::rename(staging, target).map_err(|e| {
        CmdError::io(format!(
            "renaming {} to {}: {e}",
            staging.display(),
            target.display()
        ))
    })
}

fn write_json_atomic(path: &Path, value: &impl Serialize) -> Result<(), CmdError> {
    let staging = staging_path(path);
    let body = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(&staging, body).map_err(|e| CmdError::io(format!("{}: {e}", staging.display())))?;
    commit_staging(&staging, path)
}

fn cmd_synth(args: SynthArgs) -> Result<(), CmdError> {
    if args.t_samples < 1 {
        return Err(CmdError::usage("--T must be >= 1"));
    }
    if args.subjects < 1 {
        return Err(CmdError::usage("--subjects must be >= 1"));
    }
    if args.per_subject < 1 {
        return Err(CmdError::usage("--per-subject must be >= 1"));
    }
    if args.lag_taps < 1 {
        return Err(CmdError::usage("--lag-taps must be >= 1"));
    }
    if args.snr_db.is_nan() {
        return Err(CmdError::usage("--snr-db must not be NaN"));
    }
    require_fresh(&args.out)?;
    let spec = SynthSpec {
        n_subjects: args.subjects,
        recordings_per_subject: args.per_subject,
        t_samples: args.t_samples,
        snr_db: args.snr_db,
        lag_taps: args.lag_taps,
        seed: args.seed,
    };
    let started = unix_now();
    let staging = staging_path(&args.out);
    let dirs = data::synth_dataset(&spec, &staging)?;
    let manifest = RunManifest {
        subcommand: "synth".into(),
        config: serde_json::to_value(&spec).unwrap(),
        seed: Some(args.seed),
        fold_id: None,
        inputs: vec![],
        outputs: dirs
            .iter()
            .map(|d| d.strip_prefix(&staging).unwrap().to_string_lossy().into_owned())
            .collect(),
        started_unix: started,
        finished_unix: unix_now(),
        artifact_fnv64: hash_tree(&staging)?,
    };
    write_json_atomic(&staging.join("run_manifest.json"), &manifest)?;
    commit_staging(&staging, &args.out)?;
    emit(&serde_json::json!({ "recordings": dirs.len(), "out": args.out }).to_string());
    Ok(())
}

/// Config file shape: `{ "model": {..}, "train": {..} }`, both optional and
/// partial (missing fields take defaults).
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainSpec,
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CmdError> {
    match path {
        None => Ok(RunConfig {
            model: ModelConfig::default(),
            train: TrainSpec::default(),
        }),
        Some(p) => {
            let body = fs::read_to_string(p)
                .map_err(|e| CmdError::io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&body)
                .map_err(|e| CmdError::usage(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn resolve_fold(args: &TrainArgs) -> Result<FoldSpec, CmdError> {
    match (&args.fold, &args.fold_file) {
        (Some(n), None) => {
            if !(1..=4).contains(n) {
                return Err(CmdError::usage(format!("--fold must be 1..4, got {n}")));
            }
            Ok(data::make_folds().swap_remove(*n as usize - 1))
        }
        (None, Some(path)) => {
            let body = fs::read_to_string(path)
                .map_err(|e| CmdError::io(format!("{}: {e}", path.display())))?;
            let fold: FoldSpec = serde_json::from_str(&body)
                .map_err(|e| CmdError::usage(format!("bad fold file {}: {e}", path.display())))?;
            Ok(fold.validated()?)
        }
        (None, None) => Err(CmdError::usage("one of --fold or --fold-file is required")),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CmdError> {
    require_fresh(&args.out)?;
    let fold = resolve_fold(&args)?;
    let mut config = load_run_config(args.config.as_deref())?;
    config.train.seed = args.seed;
    let dataset = data::load_dataset(&args.data)?;
    let mut model = build_model(&config.model, args.seed)?;
    let started = unix_now();
    eprintln!(
        "training fold {} on {} recordings ({} params)",
        fold.fold_id,
        dataset.len(),
        model.params.total_scalars()
    );
    let report = train::train(&mut model, &dataset, &fold, &config.train)?;
    let meta = CheckpointMeta {
        fold_id: Some(fold.fold_id),
        seed: args.seed,
        epoch: report.best_epoch,
        val_score: report.best_val_score,
        precision: config.train.precision,
    };
    let bytes = checkpoint::save_checkpoint(&model, &meta);
    let staging = staging_path(&args.out);
    fs::write(&staging, &bytes).map_err(|e| CmdError::io(format!("{}: {e}", staging.display())))?;
    commit_staging(&staging, &args.out)?;
    let mut artifact_fnv64 = BTreeMap::new();
    artifact_fnv64.insert(
        args.out.file_name().unwrap().to_string_lossy().into_owned(),
        checkpoint::checkpoint_id(&bytes),
    );
    let manifest = RunManifest {
        subcommand: "train".into(),
        config: serde_json::to_value(&config).unwrap(),
        seed: Some(args.seed),
        fold_id: Some(fold.fold_id),
        inputs: vec![args.data.to_string_lossy().into_owned()],
        outputs: vec![args.out.to_string_lossy().into_owned()],
        started_unix: started,
        finished_unix: unix_now(),
        artifact_fnv64,
    };
    write_json_atomic(&args.out.with_extension("run.json"), &manifest)?;
    emit(&serde_json::json!({
        "val_mean_r": report.best_val_score,
        "best_epoch": report.best_epoch,
        "epochs_run": report.epochs_run,
        "steps": report.steps,
        "n_train_windows": report.n_train_windows,
        "n_val_windows": report.n_val_windows,
        "checkpoint": args.out,
    })
    .to_string());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), CmdError> {
    require_fresh(&args.out)?;
    let bytes =
        fs::read(&args.ckpt).map_err(|e| CmdError::io(format!("{}: {e}", args.ckpt.display())))?;
    let (model, _header) = checkpoint::load_checkpoint(&bytes)?;
    let ckpt_id = checkpoint::checkpoint_id(&bytes);
    let dataset = data::load_dataset(&args.data)?;
    if dataset.is_empty() {
        return Err(CmdError::io(format!(
            "no recordings under {}",
            args.data.display()
        )));
    }
    let started = unix_now();
    let mut preds = Vec::with_capacity(dataset.len());
    for rec in &dataset {
        let out = model.forward(&rec.eeg.to_tensor3())?;
        preds.push(Prediction {
            subject_id: rec.subject_id.clone(),
            stimulus_id: rec.stimulus_id.clone(),
            values: ccnet::Mat::from_tensor3(&out),
        });
    }
    let staging = staging_path(&args.out);
    eval::save_predictions(&staging, &preds, &ckpt_id, "raw", None)?;
    let manifest = RunManifest {
        subcommand: "predict".into(),
        config: serde_json::json!({ "checkpoint_id": ckpt_id }),
        seed: None,
        fold_id: None,
        inputs: vec![
            args.ckpt.to_string_lossy().into_owned(),
            args.data.to_string_lossy().into_owned(),
        ],
        outputs: vec![args.out.to_string_lossy().into_owned()],
        started_unix: started,
        finished_unix: unix_now(),
        artifact_fnv64: hash_tree(&staging)?,
    };
    write_json_atomic(&staging.join("run_manifest.json"), &manifest)?;
    commit_staging(&staging, &args.out)?;
    emit(&serde_json::json!({ "predictions": preds.len(), "out": args.out }).to_string());
    Ok(())
}

fn pred_key(p: &Prediction) -> (String, String) {
    (p.subject_id.to_string(), p.stimulus_id.clone())
}

fn cmd_ensemble(args: EnsembleArgs) -> Result<(), CmdError> {
    require_fresh(&args.out)?;
    let started = unix_now();
    let mut member_sets = Vec::new();
    let mut member_ids = Vec::new();
    for dir in &args.preds {
        let (preds, manifest) = eval::load_predictions(dir)?;
        member_ids.push(manifest.checkpoint_id.clone());
        member_sets.push(preds);
    }
    let first_keys: Vec<(String, String)> = member_sets[0].iter().map(pred_key).collect();
    for (i, set) in member_sets.iter().enumerate() {
        let keys: Vec<(String, String)> = set.iter().map(pred_key).collect();
        if keys != first_keys {
            return Err(CmdError::new(
                EXIT_ALIGNMENT,
                format!(
                    "prediction set {} covers different recordings than set 0",
                    args.preds[i].display()
                ),
            ));
        }
    }
    let mut combined = Vec::with_capacity(first_keys.len());
    for idx in 0..first_keys.len() {
        let members: Vec<Prediction> =
            member_sets.iter().map(|set| set[idx].clone()).collect();
        combined.push(eval::ensemble(&members)?);
    }
    let ensemble_id = hex64(fnv1a64(member_ids.join(",").as_bytes()));
    let spec = eval::EnsembleSpec {
        members: member_ids.clone(),
        fold_id: None,
        normalization: "znorm".into(),
    };
    spec.validate()?;
    let staging = staging_path(&args.out);
    eval::save_predictions(&staging, &combined, &ensemble_id, "znorm", Some(&spec))?;
    let manifest = RunManifest {
        subcommand: "ensemble".into(),
        config: serde_json::json!({ "members": member_ids }),
        seed: None,
        fold_id: None,
        inputs: args
            .preds
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect(),
        outputs: vec![args.out.to_string_lossy().into_owned()],
        started_unix: started,
        finished_unix: unix_now(),
        artifact_fnv64: hash_tree(&staging)?,
    };
    write_json_atomic(&staging.join("run_manifest.json"), &manifest)?;
    commit_staging(&staging, &args.out)?;
    emit(&serde_json::json!({ "members": args.preds.len(), "recordings": combined.len(), "out": args.out }).to_string());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CmdError> {
    let (preds, _manifest) = eval::load_predictions(&args.pred)?;
    let dataset = data::load_dataset(&args.data)?;
    let mut pairs = Vec::with_capacity(preds.len());
    let mut mels = Vec::with_capacity(preds.len());
    for p in &preds {
        let rec = dataset
            .iter()
            .find(|r| r.subject_id == p.subject_id && r.stimulus_id == p.stimulus_id)
            .ok_or_else(|| {
                CmdError::new(
                    EXIT_ALIGNMENT,
                    format!(
                        "no recording for prediction {}/{}",
                        p.subject_id, p.stimulus_id
                    ),
                )
            })?;
        mels.push(rec.mel.clone());
    }
    for (p, m) in preds.iter().zip(&mels) {
        pairs.push((p, m));
    }
    let report = eval::evaluate_many(&pairs)?;
    emit(&serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CmdError> {
    if args.cases < 1 {
        return Err(CmdError::usage("--cases must be >= 1"));
    }
    let scale = if args.corrupt { 1.01 } else { 1.0 };
    let reports = gradcheck::standard_suite_scaled(args.seed, args.cases, scale);
    let mut all_passed = true;
    for r in &reports {
        all_passed &= r.passed;
        emit(&serde_json::json!({
            "op": r.op_name,
            "max_rel_error": r.max_rel_error,
            "tolerance": r.tolerance,
            "passed": r.passed,
        })
        .to_string());
    }
    emit(&serde_json::json!({ "ops": reports.len(), "cases_per_op": args.cases, "all_passed": all_passed }).to_string());
    if all_passed {
        Ok(())
    } else {
        Err(CmdError::new(
            EXIT_CHECK_FAILURE,
            "gradient check failed for at least one op",
        ))
    }
}
