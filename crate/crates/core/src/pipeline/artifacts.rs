//! Stage artifacts as checkpoints: datasets, autoencoders, and model
//! bundles that carry their autoencoder so the sampler needs nothing else.
//!
//! Tensor namespaces inside a model bundle: bare names are model weights,
//! `ae.*` the autoencoder, `ema.*` the EMA shadow, `opt.m.*` / `opt.v.*`
//! the optimizer moments.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::config::DatasetSpec;
use super::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::models::{AutoencoderConfig, DiTModel, DitConfig, LoraAdapter, ToyAutoencoder};
use crate::optim::{AdamW, AdamWConfig, Ema, TrainState};
use crate::tensor::Tensor;

/// Identifies the run that produced an artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactInfo {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    /// False for mid-stage checkpoints written for resumption.
    pub completed: bool,
}

/// A loaded model bundle.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model: DiTModel,
    pub ae: Option<ToyAutoencoder>,
    pub state: Option<TrainState>,
    pub info: ArtifactInfo,
    pub step: usize,
}

impl ModelBundle {
    /// The autoencoder, or a state error naming the file.
    pub fn require_ae(&self, path: &Path) -> Result<&ToyAutoencoder> {
        self.ae
            .as_ref()
            .ok_or_else(|| Error::State(format!("{} carries no autoencoder", path.display())))
    }

    /// The model with EMA weights swapped in where tracked.
    pub fn ema_model(&self) -> Result<DiTModel> {
        let mut m = self.model.clone();
        if let Some(ema) = self.state.as_ref().and_then(|s| s.ema.as_ref()) {
            for (name, t) in ema.shadow() {
                *m.params_mut().get_mut(name)? = t.clone();
            }
        }
        Ok(m)
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serializes")
}

fn from_json<T: DeserializeOwned>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    serde_json::from_str(ckpt.meta(key)?).map_err(|e| Error::Format(format!("metadata `{key}`: {e}")))
}

fn parse_meta<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    ckpt.meta(key)?
        .parse()
        .map_err(|_| Error::Format(format!("metadata `{key}` is malformed")))
}

fn put_info(ckpt: &mut Checkpoint, kind: &str, info: &ArtifactInfo, step: usize) {
    ckpt.set_meta("kind", kind);
    ckpt.set_meta("stage", &info.stage);
    ckpt.set_meta("seed", info.seed);
    ckpt.set_meta("step", step);
    ckpt.set_meta("config_hash", &info.config_hash);
    ckpt.set_meta("completed", info.completed);
}

fn get_info(ckpt: &Checkpoint, kind: &str, path: &Path) -> Result<(ArtifactInfo, usize)> {
    let found = ckpt.meta("kind")?;
    if found != kind {
        return Err(Error::State(format!(
            "{} holds a {found}, expected a {kind}",
            path.display()
        )));
    }
    Ok((
        ArtifactInfo {
            stage: ckpt.meta("stage")?.to_string(),
            seed: parse_meta(ckpt, "seed")?,
            config_hash: ckpt.meta("config_hash")?.to_string(),
            completed: parse_meta(ckpt, "completed")?,
        },
        parse_meta(ckpt, "step")?,
    ))
}

fn put_ae(ckpt: &mut Checkpoint, ae: &ToyAutoencoder) {
    ckpt.set_meta("ae_config", json(ae.config()));
    ckpt.insert_prefixed("ae.", ae.params().iter().map(|(n, p)| (n, &p.tensor)));
}

fn get_ae(ckpt: &Checkpoint) -> Result<Option<ToyAutoencoder>> {
    if !ckpt.metadata.contains_key("ae_config") {
        return Ok(None);
    }
    let cfg: AutoencoderConfig = from_json(ckpt, "ae_config")?;
    Ok(Some(ToyAutoencoder::from_parts(cfg, ckpt.with_prefix("ae."))?))
}

fn put_state(ckpt: &mut Checkpoint, state: &TrainState) {
    ckpt.set_meta("opt_config", json(state.opt.config()));
    ckpt.set_meta("opt_step", state.opt.step_count());
    ckpt.set_meta("window_sum", state.window.0);
    ckpt.set_meta("window_len", state.window.1);
    for (name, t) in state.opt.state_tensors() {
        ckpt.tensors.insert(format!("opt.{name}"), t);
    }
    if let Some(ema) = &state.ema {
        ckpt.set_meta("ema_decay", ema.decay());
        ckpt.insert_prefixed("ema.", ema.shadow().iter().map(|(n, t)| (n.as_str(), t)));
    }
}

fn get_state(ckpt: &Checkpoint, step: usize) -> Result<Option<TrainState>> {
    if !ckpt.metadata.contains_key("opt_config") {
        return Ok(None);
    }
    let cfg: AdamWConfig = from_json(ckpt, "opt_config")?;
    let opt = AdamW::restore(cfg, parse_meta(ckpt, "opt_step")?, &ckpt.with_prefix("opt."))?;
    let ema = match ckpt.metadata.get("ema_decay") {
        Some(_) => Some(Ema::from_shadow(
            parse_meta(ckpt, "ema_decay")?,
            ckpt.with_prefix("ema."),
        )),
        None => None,
    };
    Ok(Some(TrainState {
        step,
        opt,
        ema,
        window: (parse_meta(ckpt, "window_sum")?, parse_meta(ckpt, "window_len")?),
    }))
}

fn is_model_tensor(name: &str) -> bool {
    !["ae.", "ema.", "opt."].iter().any(|p| name.starts_with(p))
}

/// Model weights plus optional autoencoder and training state.
pub fn model_checkpoint(
    model: &DiTModel,
    ae: Option<&ToyAutoencoder>,
    state: Option<&TrainState>,
    info: &ArtifactInfo,
) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    let step = state.map_or(0, |s| s.step);
    put_info(&mut ckpt, "model", info, step);
    ckpt.set_meta("latent_spec", model.spec());
    ckpt.set_meta("model_config", json(model.config()));
    ckpt.set_meta("lora", json(&model.adapters().values().collect::<Vec<_>>()));
    ckpt.insert_prefixed("", model.params().iter().map(|(n, p)| (n, &p.tensor)));
    if let Some(ae) = ae {
        put_ae(&mut ckpt, ae);
    }
    if let Some(s) = state {
        put_state(&mut ckpt, s);
    }
    ckpt
}

pub fn model_from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<ModelBundle> {
    let (info, step) = get_info(ckpt, "model", path)?;
    let cfg: DitConfig = from_json(ckpt, "model_config")?;
    let adapters: Vec<LoraAdapter> = from_json(ckpt, "lora")?;
    let adapters: BTreeMap<String, LoraAdapter> = adapters.into_iter().map(|a| (a.target.clone(), a)).collect();
    let tensors: BTreeMap<String, Tensor> = ckpt
        .tensors
        .iter()
        .filter(|(n, _)| is_model_tensor(n))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    Ok(ModelBundle {
        model: DiTModel::from_parts(cfg, tensors, adapters)?,
        ae: get_ae(ckpt)?,
        state: get_state(ckpt, step)?,
        info,
        step,
    })
}

pub fn save_model(
    path: &Path,
    model: &DiTModel,
    ae: Option<&ToyAutoencoder>,
    state: Option<&TrainState>,
    info: &ArtifactInfo,
) -> Result<()> {
    save_checkpoint(path, &model_checkpoint(model, ae, state, info))
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    model_from_checkpoint(&load_checkpoint(path)?, path)
}

/// A loaded autoencoder artifact.
#[derive(Clone, Debug)]
pub struct AeBundle {
    pub ae: ToyAutoencoder,
    pub state: Option<TrainState>,
    pub info: ArtifactInfo,
    pub step: usize,
}

pub fn save_autoencoder(
    path: &Path,
    ae: &ToyAutoencoder,
    state: Option<&TrainState>,
    info: &ArtifactInfo,
) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    put_info(&mut ckpt, "autoencoder", info, state.map_or(0, |s| s.step));
    ckpt.set_meta("latent_spec", ae.spec());
    put_ae(&mut ckpt, ae);
    if let Some(s) = state {
        put_state(&mut ckpt, s);
    }
    save_checkpoint(path, &ckpt)
}

pub fn load_autoencoder(path: &Path) -> Result<AeBundle> {
    let ckpt = load_checkpoint(path)?;
    let (info, step) = get_info(&ckpt, "autoencoder", path)?;
    let ae = get_ae(&ckpt)?.ok_or_else(|| Error::Format("autoencoder tensors missing".into()))?;
    Ok(AeBundle {
        ae,
        state: get_state(&ckpt, step)?,
        info,
        step,
    })
}

fn labels_tensor(labels: &[usize]) -> Tensor {
    Tensor::from_vec(labels.iter().map(|&l| l as f32).collect())
}

fn labels_from(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("label {v} is not a class id")))
            }
        })
        .collect()
}

/// Train and validation images with labels, plus the generating spec.
pub fn save_dataset(path: &Path, split: &DataSplit, spec: &DatasetSpec, info: &ArtifactInfo) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    put_info(&mut ckpt, "dataset", info, 0);
    ckpt.set_meta("data_spec", json(spec));
    for (name, d) in [("train", &split.train), ("val", &split.val)] {
        ckpt.tensors.insert(format!("{name}.images"), d.images.clone());
        ckpt.tensors.insert(format!("{name}.labels"), labels_tensor(&d.labels));
    }
    save_checkpoint(path, &ckpt)
}

pub fn load_dataset(path: &Path) -> Result<(DataSplit, DatasetSpec)> {
    let ckpt = load_checkpoint(path)?;
    get_info(&ckpt, "dataset", path)?;
    let part = |name: &str| -> Result<Dataset> {
        Dataset::new(
            ckpt.tensor(&format!("{name}.images"))?.clone(),
            labels_from(ckpt.tensor(&format!("{name}.labels"))?)?,
        )
    };
    Ok((
        DataSplit {
            train: part("train")?,
            val: part("val")?,
        },
        from_json(&ckpt, "data_spec")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LatentSpec, DEFAULT_TARGETS};
    use crate::optim::AdamWConfig;
    use crate::rng::Rng;

    fn info() -> ArtifactInfo {
        ArtifactInfo {
            stage: "finetune".into(),
            seed: 4,
            config_hash: "abc".into(),
            completed: false,
        }
    }

    #[test]
    fn model_bundle_round_trip() {
        let cfg = DitConfig {
            spec: LatentSpec::new(4, 2, 4).unwrap(),
            image_size: (16, 16),
            hidden: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            freq_dim: 8,
            guidance_embed: true,
        };
        let mut rng = Rng::new(1);
        let mut m = DiTModel::new(cfg, &mut rng).unwrap();
        let targets: Vec<String> = DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect();
        m.attach_lora(&targets, 2, 2.0, &mut rng).unwrap();
        let ae = ToyAutoencoder::new(
            AutoencoderConfig {
                spec: m.spec(),
                hidden: 8,
                image_channels: 3,
            },
            &mut rng,
        )
        .unwrap();
        let mut ema = Ema::new(0.9);
        m.params().update_ema(&mut ema).unwrap();
        let state = TrainState {
            step: 7,
            opt: AdamW::new(AdamWConfig::default()),
            ema: Some(ema),
            window: (1.25, 3),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dcgn");
        save_model(&path, &m, Some(&ae), Some(&state), &info()).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.info, info());
        assert_eq!(back.step, 7);
        assert!(back.model.params().matches_bitwise(&m.params().snapshot(|_, _| true)));
        assert_eq!(back.model.params().len(), m.params().len());
        assert_eq!(back.model.adapters(), m.adapters());
        assert!(back.model.is_guidance_distilled());
        let s = back.state.unwrap();
        assert_eq!(s.window, (1.25, 3));
        assert_eq!(s.ema.unwrap().shadow().len(), state.ema.unwrap().shadow().len());
        assert!(back
            .ae
            .unwrap()
            .params()
            .matches_bitwise(&ae.params().snapshot(|_, _| true)));
        assert!(matches!(load_autoencoder(&path), Err(Error::State(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let spec = DatasetSpec {
            per_class: 2,
            val_per_class: 1,
            image_size: 8,
            seed: Some(1),
            ..DatasetSpec::default()
        };
        let split = super::super::data::gen_dataset(&spec, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dcgn");
        save_dataset(&path, &split, &spec, &info()).unwrap();
        let (back, s) = load_dataset(&path).unwrap();
        assert_eq!(back, split);
        assert_eq!(s, spec);
    }
}
