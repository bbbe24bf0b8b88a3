//! Subcommand bodies.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{SecondsFormat, Utc};
use confood_core::dropout::{score_records, RecordLine};
use confood_core::eval::EvalError;
use confood_core::fsio::write_atomic;
use confood_core::probe::{serve, ProbePool};
use confood_core::synthetic::CorpusEntry;
use confood_core::*;
use serde_json::{json, Value};

use crate::{CliError, ModelKind, ServeArgs, Settings};

pub const ID_QUERIES_FILE: &str = "id_queries.jsonl";
pub const OOD_QUERIES_FILE: &str = "ood_queries.jsonl";
pub const CALIBRATION_RECORDS_FILE: &str = "calibration_records.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";

pub fn calibration_file(layer: LayerId) -> String {
    format!("calibration_l{layer}.json")
}

pub fn manifest_file(command: &str) -> String {
    format!("manifest_{command}.json")
}

/// Queries read from a JSONL file, plus any synthetic corpus entries.
#[derive(Debug, Default)]
pub struct QueryFile {
    pub queries: Vec<Query>,
    pub entries: Vec<CorpusEntry>,
}

/// Reads corpus-entry lines or `{"id", "text"}` lines. The synthetic model
/// accepts only corpus entries.
pub fn read_queries(path: &Path, model: ModelKind) -> Result<QueryFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut out = QueryFile::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), n + 1);
        let value: Value =
            serde_json::from_str(line).map_err(|e| CliError::Input(format!("{}: {e}", at())))?;
        if value.get("query_id").is_some() {
            let entry = CorpusEntry::from_json_line(line)
                .map_err(|e| CliError::Input(format!("{}: {e}", at())))?;
            out.queries.push(entry.query());
            out.entries.push(entry);
        } else if model == ModelKind::Synthetic {
            return Err(CliError::Input(format!(
                "{}: the synthetic model needs corpus entries",
                at()
            )));
        } else {
            let query: Query = serde_json::from_value(value)
                .map_err(|e| CliError::Input(format!("{}: {e}", at())))?;
            out.queries.push(query);
        }
    }
    if out.queries.is_empty() {
        return Err(CliError::Input(format!(
            "{} holds no queries",
            path.display()
        )));
    }
    Ok(out)
}

enum Subject {
    Synthetic(SyntheticModel),
    Probe(ProbePool),
}

impl Subject {
    fn open(settings: &Settings, entries: &[CorpusEntry]) -> Result<Self, CliError> {
        match settings.model {
            ModelKind::Synthetic => SyntheticModel::new(entries)
                .map(Subject::Synthetic)
                .map_err(|e| CliError::Input(e.to_string())),
            ModelKind::Probe => {
                let argv = settings.probe_cmd.as_deref().unwrap_or_default();
                let pool = ProbePool::spawn(argv, settings.jobs)
                    .map_err(|e| CliError::Handshake(e.to_string()))?;
                pool.handshake(&settings.detection.layers)
                    .map_err(|e| CliError::Handshake(e.to_string()))?;
                Ok(Subject::Probe(pool))
            }
        }
    }

    fn model(&self) -> &(dyn SubjectModel + Sync) {
        match self {
            Subject::Synthetic(m) => m,
            Subject::Probe(p) => p,
        }
    }

    fn judge(&self) -> &(dyn Judge + Sync) {
        match self {
            Subject::Synthetic(_) => &ExactJudge,
            Subject::Probe(p) => p,
        }
    }
}

fn required_out_dir(settings: &Settings) -> Result<&Path, CliError> {
    let dir = settings
        .out_dir
        .as_deref()
        .ok_or_else(|| CliError::Config("--out-dir is required".into()))?;
    check_dir(dir)?;
    Ok(dir)
}

fn check_dir(dir: &Path) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Input(format!(
            "output directory {} does not exist",
            dir.display()
        )))
    }
}

fn required_path<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Config(format!("{flag} is required")))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn jsonl(lines: impl IntoIterator<Item = String>) -> Vec<u8> {
    let mut out = String::new();
    for line in lines {
        out.push_str(&line);
        out.push('\n');
    }
    out.into_bytes()
}

/// The only output that carries a timestamp.
fn write_manifest(
    dir: &Path,
    command: &str,
    settings: &Settings,
    files: &[String],
    extra: Value,
) -> Result<(), CliError> {
    let manifest = json!({
        "command": command,
        "created_at": Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
        "version": env!("CARGO_PKG_VERSION"),
        "settings": settings,
        "files": files,
        "details": extra,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write(&dir.join(manifest_file(command)), text.as_bytes())
}

fn detect_error(e: DetectError) -> CliError {
    match e {
        DetectError::Config(m) => CliError::Config(m),
        DetectError::MissingCalibration(l) => {
            CliError::Input(format!("no calibration set for layer {l}"))
        }
        other => CliError::Runtime(other.to_string()),
    }
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::Config(m) => CliError::Config(m),
        other => CliError::Runtime(other.to_string()),
    }
}

pub fn simulate(settings: &Settings) -> Result<ExitCode, CliError> {
    let dir = required_out_dir(settings)?;
    let spec = &settings.spec;
    if spec.rho_id.center == spec.rho_ood.center {
        eprintln!(
            "warning: rho_id equals rho_ood ({}); in-distribution and OOD queries are indistinguishable",
            spec.rho_id.center
        );
    }
    let corpus = generate(spec).map_err(|e| CliError::Config(e.to_string()))?;
    let files = [
        (ID_QUERIES_FILE, &corpus.in_distribution),
        (OOD_QUERIES_FILE, &corpus.out_of_distribution),
    ];
    for (name, entries) in files {
        write(
            &dir.join(name),
            &jsonl(entries.iter().map(CorpusEntry::to_json_line)),
        )?;
    }
    write_manifest(
        dir,
        "simulate",
        settings,
        &[ID_QUERIES_FILE.into(), OOD_QUERIES_FILE.into()],
        json!({ "spec": spec }),
    )?;
    eprintln!(
        "wrote {} in-distribution and {} OOD queries to {}",
        corpus.in_distribution.len(),
        corpus.out_of_distribution.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn calibrate(settings: &Settings) -> Result<ExitCode, CliError> {
    let dir = required_out_dir(settings)?;
    let input = read_queries(
        required_path(&settings.queries, "--queries")?,
        settings.model,
    )?;
    let subject = Subject::open(settings, &input.entries)?;
    let cal = confood_core::calibrate(
        subject.model(),
        subject.judge(),
        &input.queries,
        &settings.detection,
        settings.jobs,
    )
    .map_err(detect_error)?;

    let mut files = Vec::new();
    for (layer, set) in &cal.sets {
        let name = calibration_file(*layer);
        write(&dir.join(&name), (set.to_json() + "\n").as_bytes())?;
        files.push(name);
    }
    let records = cal
        .records
        .iter()
        .map(|r| RecordLine::from_layer(r, None).to_json_line());
    write(&dir.join(CALIBRATION_RECORDS_FILE), &jsonl(records))?;
    files.push(CALIBRATION_RECORDS_FILE.into());
    write_manifest(
        dir,
        "calibrate",
        settings,
        &files,
        json!({ "layers": cal.manifest }),
    )?;
    for m in &cal.manifest {
        eprintln!(
            "layer {}: {} of {} calibration queries changed",
            m.layer_id, m.changed, m.queries
        );
    }
    Ok(ExitCode::SUCCESS)
}

/// Loads `calibration_l<layer>.json` for every configured layer.
pub fn load_calibration(dir: &Path, layers: &[LayerId]) -> Result<CalibrationSets, CliError> {
    let mut sets = CalibrationSets::new();
    for &layer in layers {
        let path = dir.join(calibration_file(layer));
        let text = fs::read_to_string(&path).map_err(|e| {
            CliError::Input(format!("missing calibration file {}: {e}", path.display()))
        })?;
        let set = CalibrationSet::from_json_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if set.layer_id() != layer {
            return Err(CliError::Input(format!(
                "{} holds layer {}, expected {layer}",
                path.display(),
                set.layer_id()
            )));
        }
        sets.insert(layer, set);
    }
    Ok(sets)
}

pub fn detect(
    settings: &Settings,
    query_id: Option<&str>,
    query_text: Option<&str>,
) -> Result<ExitCode, CliError> {
    if let Some(dir) = &settings.out_dir {
        check_dir(dir)?;
    }
    let cfg = &settings.detection;
    let cals = load_calibration(
        required_path(&settings.calibration, "--calibration")?,
        &cfg.layers,
    )?;
    let mut input = match &settings.queries {
        Some(path) => read_queries(path, settings.model)?,
        None => QueryFile::default(),
    };
    let single = query_id.is_some() || query_text.is_some();
    if let Some(text) = query_text {
        input.queries = vec![Query::new(text, text)];
    } else if let Some(id) = query_id {
        let q = input
            .queries
            .iter()
            .find(|q| q.id == id)
            .cloned()
            .ok_or_else(|| CliError::Input(format!("query {id} not found in --queries")))?;
        input.queries = vec![q];
    } else if input.queries.is_empty() {
        return Err(CliError::Config("--queries is required".into()));
    }

    let subject = Subject::open(settings, &input.entries)?;
    let measured = measure_queries(
        subject.model(),
        subject.judge(),
        &input.queries,
        &cfg.layers,
        &cfg.budget,
        settings.jobs,
    )
    .map_err(detect_error)?;

    let mut lines = Vec::new();
    let mut last = DetectionOutcome::InDistribution;
    for (query, records) in input.queries.iter().zip(&measured) {
        let detection = score_records(&query.id, records, &cals, cfg.method, cfg.epsilon)
            .map_err(detect_error)?;
        println!("{}", detection.summary_line().to_json_line());
        lines.extend(detection.to_lines().iter().map(RecordLine::to_json_line));
        last = detection.outcome;
    }
    if let Some(dir) = &settings.out_dir {
        write(&dir.join(DETECTIONS_FILE), &jsonl(lines))?;
    }
    Ok(if single && last.is_ood() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

pub fn evaluate(settings: &Settings) -> Result<ExitCode, CliError> {
    let dir = required_out_dir(settings)?;
    let (id, ood, entries) = match (&settings.id_queries, &settings.ood_queries) {
        (Some(a), Some(b)) => {
            let a = read_queries(a, settings.model)?;
            let b = read_queries(b, settings.model)?;
            let entries = a.entries.into_iter().chain(b.entries).collect();
            (a.queries, b.queries, entries)
        }
        (None, None) if settings.model == ModelKind::Synthetic => {
            let corpus = generate(&settings.spec).map_err(|e| CliError::Config(e.to_string()))?;
            let entries: Vec<CorpusEntry> = corpus.all_entries().cloned().collect();
            (corpus.id_queries(), corpus.ood_queries(), entries)
        }
        (None, None) => {
            return Err(CliError::Config(
                "--model probe needs --id-queries and --ood-queries".into(),
            ))
        }
        _ => {
            return Err(CliError::Config(
                "--id-queries and --ood-queries go together".into(),
            ))
        }
    };
    let cfg = &settings.detection;
    let mut baselines = BaselineSpec::standard(cfg);
    if settings.all_methods {
        for method in MergingMethod::ALL {
            if method != cfg.method {
                baselines.push(BaselineSpec::EnsembleMerged {
                    layers: cfg.layers.clone(),
                    method,
                });
            }
        }
    }
    let subject = Subject::open(settings, &entries)?;
    let report = run_experiment(
        subject.model(),
        subject.judge(),
        &id,
        &ood,
        &settings.split,
        cfg,
        &baselines,
        settings.jobs,
    )
    .map_err(eval_error)?;
    let written = report.write_to_dir(dir).map_err(eval_error)?;
    let files: Vec<String> = written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    write_manifest(
        dir,
        "evaluate",
        settings,
        &files,
        json!({ "n_id": id.len(), "n_ood": ood.len() }),
    )?;
    for b in &report.baselines {
        println!(
            "{}",
            json!({ "label": b.label, "auroc_mean": b.auroc_mean, "auroc_std": b.auroc_std })
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub fn serve_synthetic(args: &ServeArgs) -> Result<ExitCode, CliError> {
    let mut entries = Vec::new();
    for path in &args.corpora {
        entries.extend(read_queries(path, ModelKind::Synthetic)?.entries);
    }
    let model = SyntheticModel::new(&entries).map_err(|e| CliError::Input(e.to_string()))?;
    serve(&model, &ExactJudge, io::stdin().lock(), io::stdout().lock())
        .map_err(|e| CliError::Runtime(format!("probe server: {e}")))?;
    Ok(ExitCode::SUCCESS)
}
