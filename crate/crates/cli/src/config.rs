use std::path::{Path, PathBuf};

use dms::data::TaskSpec;
use dms::search::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Schema tag this build reads and writes.
pub const SCHEMA: &str = "dms-run/1";

/// A pipeline configuration plus where its outputs go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub run: PipelineConfig,
}

/// Parses, checks the schema tag, validates, resolves relative paths against
/// the file's directory, and fills every default.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_config_str(&text, base).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        let at = if at == "." { "top level".into() } else { format!("`{at}`") };
        CliError::Invalid(format!("at {at}: {}", e.inner()))
    })?;
    if cfg.schema != SCHEMA {
        return Err(CliError::Invalid(format!(
            "at `schema`: expected \"{SCHEMA}\", found \"{}\"",
            cfg.schema
        )));
    }
    let absolute = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    if let Some(p) = &mut cfg.out_dir {
        absolute(p);
    }
    if let Some(p) = &mut cfg.run.checkpoint {
        absolute(p);
    }
    if let Some(p) = &mut cfg.run.resource.latency_table {
        absolute(p);
    }
    if let TaskSpec::CsvClassification { path, .. } = &mut cfg.run.task {
        absolute(path);
    }
    cfg.run.validate()?;
    cfg.run = cfg.run.resolved();
    Ok(cfg)
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
