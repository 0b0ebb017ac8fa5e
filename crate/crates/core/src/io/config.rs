//! TOML configuration with dotted-key overrides and a stable content hash.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

/// Parses the value side of an override as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a TOML tree, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let slot = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        table = slot
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Merges the file (if any) with overrides, then decodes and validates.
/// Unknown keys are reported with their full dotted path.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(p.to_path_buf()),
                _ => e.into(),
            })?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg = decode(Value::Table(root))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    let cfg = decode(Value::Table(root))?;
    cfg.validate()?;
    Ok(cfg)
}

fn decode(v: Value) -> Result<PipelineConfig> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        match unknown_field(&inner) {
            Some(field) => {
                let key = if path == "." || path.is_empty() {
                    field.to_string()
                } else if path == field || path.ends_with(&format!(".{field}")) {
                    path.clone()
                } else {
                    format!("{path}.{field}")
                };
                Error::Config(format!("unknown key `{key}`"))
            }
            None => Error::Config(format!("`{path}`: {inner}")),
        }
    })
}

fn unknown_field(msg: &str) -> Option<&str> {
    let rest = msg.strip_prefix("unknown field `")?;
    rest.split('`').next()
}

#[derive(Serialize)]
struct HashInput<'a> {
    seed: u64,
    data: &'a crate::pipeline::DatasetSpec,
    latent: &'a crate::pipeline::LatentPair,
    autoencoder: &'a crate::pipeline::AutoencoderSection,
    model: &'a crate::pipeline::ModelSection,
    adapt: &'a crate::pipeline::AdaptSection,
    stage: &'a str,
    stage_config: &'a crate::pipeline::StageConfig,
}

/// SHA-256 over the settings that shape a stage's result: seed, data,
/// latent spaces, architectures, and that stage's own section.
pub fn config_hash(cfg: &PipelineConfig, stage: &str) -> Result<String> {
    let input = HashInput {
        seed: cfg.seed,
        data: &cfg.data,
        latent: &cfg.latent,
        autoencoder: &cfg.autoencoder,
        model: &cfg.model,
        adapt: &cfg.adapt,
        stage,
        stage_config: cfg.stage.get(stage)?,
    };
    let json = serde_json::to_string(&input).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
