use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dms::data::Dataset;
use dms::fidelity::{self, FidelityReport};
use dms::network::{ArchitectureDescription, Provenance};
use dms::resource::{fit_latency_model, LatencyModel, LatencyTable};
use dms::search::{
    evaluate_on, reduced, retrain as retrain_model, run_pipeline, Checkpoint, EpochRecord,
    EvalMetrics, PipelineReport, Split,
};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{parse_config, RunConfig};
use crate::{CliError, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ARCHITECTURE_FILE: &str = "architecture.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const SEARCH_FILE: &str = "search.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const RETRAIN_FILE: &str = "retrain.json";
pub const LOCK_FILE: &str = ".dms.lock";

/// An output directory held under an exclusive lock until dropped.
pub struct RunDir {
    pub path: PathBuf,
    _lock: File,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(CliError::io(path))?;
        let path = path.canonicalize().map_err(CliError::io(path))?;
        let lock_path = path.join(LOCK_FILE);
        let lock = File::create(&lock_path).map_err(CliError::io(&lock_path))?;
        match lock.try_lock() {
            Ok(()) => Ok(Self { path, _lock: lock }),
            Err(std::fs::TryLockError::WouldBlock) => Err(CliError::Invalid(format!(
                "{} is in use by another dms process",
                path.display()
            ))),
            Err(std::fs::TryLockError::Error(e)) => Err(CliError::io(&lock_path)(e)),
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Replaces `name` atomically.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.file(name);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.path).map_err(CliError::io(&path))?;
        tmp.write_all(bytes).map_err(CliError::io(&path))?;
        tmp.persist(&path).map_err(|e| CliError::io(&path)(e.error))?;
        Ok(())
    }

    fn metrics(&self) -> Result<MetricsWriter> {
        let path = self.file(METRICS_FILE);
        let file = File::create(&path).map_err(CliError::io(&path))?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
            path,
        })
    }
}

/// One JSON line per epoch record, flushed as it arrives.
struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    fn record(&mut self, r: &EpochRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }

    fn callback(&mut self) -> impl FnMut(&EpochRecord) -> dms::search::Result<()> + '_ {
        move |r| {
            info!(
                "{} epoch {}: task {} resource {} r_c {} r_t {}",
                r.stage,
                r.epoch,
                fmt_opt(r.task_loss),
                fmt_opt(r.resource_loss),
                fmt_opt(r.r_c),
                fmt_opt(r.r_t)
            );
            self.record(r).map_err(|e| {
                dms::search::SearchError::Config(format!("{}: {e}", self.path.display()))
            })
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s.into_bytes()
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn read_architecture(path: &Path) -> Result<ArchitectureDescription> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    ArchitectureDescription::from_json(&text)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

/// Resolves the output directory (flag first), locks it, and echoes the
/// fully resolved configuration into it.
fn prepare(mut cfg: RunConfig, out: Option<&Path>) -> Result<(RunConfig, RunDir)> {
    let dir = match (out, &cfg.out_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => p.clone(),
        (None, None) => {
            return Err(CliError::Invalid(
                "no output directory: pass --out or set out_dir".into(),
            ))
        }
    };
    let run = RunDir::open(&dir)?;
    cfg.out_dir = Some(run.path.clone());
    run.write(CONFIG_FILE, cfg.to_json().as_bytes())?;
    Ok((cfg, run))
}

/// Runs the configured pipeline and writes the run directory.
pub fn search(config: &Path, out: Option<&Path>) -> Result<(PathBuf, PipelineReport)> {
    let (cfg, dir) = prepare(parse_config(config)?, out)?;
    let mut metrics = dir.metrics()?;
    let outcome = run_pipeline(&cfg.run, &mut metrics.callback())?;
    dir.write(ARCHITECTURE_FILE, outcome.architecture.to_json().as_bytes())?;
    dir.write(MODEL_FILE, &Checkpoint::of(&outcome.model).to_bytes())?;
    dir.write(SEARCH_FILE, &outcome.search.to_bytes())?;
    dir.write(REPORT_FILE, &json(&outcome.report))?;
    Ok((dir.path.clone(), outcome.report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub source: Option<String>,
    pub epochs: usize,
    pub val: Option<EvalMetrics>,
    pub test: EvalMetrics,
}

/// Trains a fresh model: the given architecture, or the configured supernet
/// with every mask at one (the pretrained weights `p` and `p-` start from).
pub fn retrain(
    config: &Path,
    out: Option<&Path>,
    architecture: Option<&Path>,
) -> Result<(PathBuf, RetrainReport)> {
    let cfg = parse_config(config)?;
    let desc = architecture.map(read_architecture).transpose()?;
    let (cfg, dir) = prepare(cfg, out)?;
    let data = cfg.run.task.generate().map_err(dms::search::SearchError::from)?;
    let hp = &cfg.run.hyperparams;
    let mut metrics = dir.metrics()?;
    let (net, desc) = match desc {
        Some(desc) => {
            let net = retrain_model(&desc.model, &reduced(&data, &desc)?, hp, &mut metrics.callback())?;
            (net, desc)
        }
        None => {
            let net = retrain_model(&cfg.run.model, &data, hp, &mut metrics.callback())?;
            let (mut desc, _) = net.export_pruned().map_err(dms::search::SearchError::from)?;
            desc.provenance = Provenance {
                source: Some("supernet".into()),
                pipeline: None,
                seed: Some(hp.seed),
            };
            (net, desc)
        }
    };
    let report = RetrainReport {
        source: desc.provenance.source.clone(),
        epochs: hp.retrain_epochs,
        val: eval_split(&net, &desc, &data, Split::Val)?,
        test: evaluate_on(&net, &desc, &data, Split::Test)?,
    };
    dir.write(ARCHITECTURE_FILE, desc.to_json().as_bytes())?;
    dir.write(MODEL_FILE, &Checkpoint::of(&net).to_bytes())?;
    dir.write(RETRAIN_FILE, &json(&report))?;
    Ok((dir.path.clone(), report))
}

fn eval_split(
    net: &dms::network::Network,
    desc: &ArchitectureDescription,
    data: &Dataset,
    split: Split,
) -> Result<Option<EvalMetrics>> {
    let rows = match split {
        Split::Val => data.val.rows(),
        Split::Test => data.test.rows(),
    };
    if rows == 0 {
        return Ok(None);
    }
    Ok(Some(evaluate_on(net, desc, data, split)?))
}

/// Evaluates the model saved in a run directory using only its artifacts.
pub fn eval(run: &Path, split: Split) -> Result<Option<EvalMetrics>> {
    let cfg = parse_config(&run.join(CONFIG_FILE))?;
    let desc = read_architecture(&run.join(ARCHITECTURE_FILE))?;
    let net = Checkpoint::load(&run.join(MODEL_FILE))?.network()?;
    let data = cfg.run.task.generate().map_err(dms::search::SearchError::from)?;
    eval_split(&net, &desc, &data, split)
}

/// Exports the discrete architecture and pruned weights of a supernet
/// checkpoint.
pub fn export(checkpoint: &Path, out: &Path) -> Result<ArchitectureDescription> {
    let net = Checkpoint::load(checkpoint)?.network()?;
    if net.operators.is_empty() {
        return Err(CliError::Invalid(format!(
            "{} holds a discrete model with nothing to export",
            checkpoint.display()
        )));
    }
    let (mut desc, pruned) = net.export_pruned().map_err(dms::search::SearchError::from)?;
    desc.provenance.source = Some("export".into());
    let dir = RunDir::open(out)?;
    dir.write(ARCHITECTURE_FILE, desc.to_json().as_bytes())?;
    dir.write(MODEL_FILE, &Checkpoint::of(&pruned).to_bytes())?;
    Ok(desc)
}

/// Fits the per-layer latency model of a measured table and writes it as JSON.
pub fn fit_latency(table: &Path, out: &Path) -> Result<LatencyModel> {
    let invalid = |e: dms::resource::ResourceError| CliError::Invalid(e.to_string());
    let t = LatencyTable::from_path(table).map_err(invalid)?;
    let model = fit_latency_model(&t).map_err(invalid)?;
    let mut tmp = tempfile::NamedTempFile::new_in(
        out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")),
    )
    .map_err(CliError::io(out))?;
    tmp.write_all(&json(&model)).map_err(CliError::io(out))?;
    tmp.persist(out).map_err(|e| CliError::io(out)(e.error))?;
    Ok(model)
}

pub fn gradcheck(seeds: u64) -> Result<FidelityReport> {
    fidelity::run(seeds).map_err(|e| CliError::Invalid(format!("gradient check failed to run: {e}")))
}
