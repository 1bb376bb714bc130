//! On-disk artifacts: checkpoints, masked datasets, metrics tables and
//! image dumps for inspection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::masking::{MaskedDataset, MaskingConfig};
use crate::nn::{Hyperparams, NetworkParams, NetworkSpec, ParamSet};
use crate::saliency::Heatmap;
use crate::trainer::{EpochRecord, Stage, TrainedModel};

/// Bumped whenever a sidecar layout changes.
pub const SIDECAR_VERSION: u32 = 1;

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    version: u32,
    spec: NetworkSpec,
    hyper: Hyperparams,
    final_lr: f64,
    stage: Stage,
    history: Vec<EpochRecord>,
}

/// Writes the weights as an MTCK container at `path` and the rest of the
/// model description to `path` + `.json`.
pub fn save_model(path: &Path, model: &TrainedModel) -> Result<()> {
    let names = model.params.weights.names();
    container::write_file(path, names.iter().map(String::as_str).zip(model.params.weights.tensors()))?;
    let meta = ModelMeta {
        version: SIDECAR_VERSION,
        spec: model.spec.clone(),
        hyper: model.hyper.clone(),
        final_lr: model.final_lr,
        stage: model.stage,
        history: model.history.clone(),
    };
    fs::write(sidecar(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Inverse of [`save_model`]; momentum buffers come back zeroed.
pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let meta: ModelMeta = serde_json::from_slice(&fs::read(sidecar(path))?)?;
    if meta.version != SIDECAR_VERSION {
        return Err(Error::Config(format!(
            "{}: sidecar version {} (expected {SIDECAR_VERSION})",
            path.display(),
            meta.version
        )));
    }
    let weights = ParamSet::from_named(&meta.spec, container::read_file(path)?)?;
    Ok(TrainedModel {
        spec: meta.spec,
        params: NetworkParams::from_weights(weights),
        hyper: meta.hyper,
        history: meta.history,
        final_lr: meta.final_lr,
        stage: meta.stage,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub version: u32,
    pub policy: String,
    pub method: String,
    pub grid: String,
    pub iteration: usize,
    pub global_mean: Option<f64>,
    pub taus: Vec<Option<f64>>,
    pub targets: Vec<usize>,
    pub mean_masked_area: f64,
}

/// Masked images as MTCK at `path`, masking statistics at `path` + `.json`.
pub fn save_masked(path: &Path, masked: &MaskedDataset, cfg: &MaskingConfig) -> Result<()> {
    masked.dataset.save(path)?;
    let side = MaskSidecar {
        version: SIDECAR_VERSION,
        policy: cfg.policy.to_string(),
        method: cfg.method.to_string(),
        grid: cfg.grid.to_string(),
        iteration: masked.iteration,
        global_mean: masked.masks.global_mean,
        taus: masked.masks.taus.clone(),
        targets: masked.masks.targets.clone(),
        mean_masked_area: masked.masks.mean_masked_area(),
    };
    fs::write(sidecar(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn load_masked_sidecar(path: &Path) -> Result<MaskSidecar> {
    Ok(serde_json::from_slice(&fs::read(sidecar(path))?)?)
}

/// One row of a per-epoch metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

impl MetricRow {
    /// Training rows for every epoch of `model`, the last `finetuned` of
    /// them tagged as finetuning.
    pub fn from_history(model: &TrainedModel) -> Vec<MetricRow> {
        let finetuned = model.finetune_iterations();
        let erm = model.history.len().saturating_sub(finetuned);
        model
            .history
            .iter()
            .enumerate()
            .map(|(i, r)| MetricRow {
                stage: if i < erm { "erm".into() } else { format!("finetune{}", i - erm + 1) },
                epoch: r.epoch,
                split: "train".into(),
                loss: r.train_loss,
                accuracy: r.train_acc,
                lr: r.lr,
            })
            .collect()
    }
}

/// `stage,epoch,split,loss,accuracy,lr` with round-trip float formatting.
pub fn write_metrics<W: Write>(mut out: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(out, "stage,epoch,split,loss,accuracy,lr")?;
    for r in rows {
        writeln!(out, "{},{},{},{:?},{:?},{:?}", r.stage, r.epoch, r.split, r.loss, r.accuracy, r.lr)?;
    }
    Ok(())
}

/// Binary PGM of a heatmap, min-max scaled to 0..=255.
pub fn write_pgm(path: &Path, map: &Heatmap) -> Result<()> {
    let (lo, hi) = (map.min(), map.max());
    let mut bytes = format!("P5\n{} {}\n255\n", map.w, map.h).into_bytes();
    bytes.extend(map.values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    fs::write(path, bytes)?;
    Ok(())
}

/// Binary PPM of sample `i` (one or three channels, values in `[0, 1]`).
pub fn write_ppm(path: &Path, ds: &LabeledDataset, i: usize) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    if c != 1 && c != 3 {
        return Err(Error::Input(format!("cannot render {c} channels as RGB")));
    }
    let img = ds.image(i);
    let plane = h * w;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        for ch in 0..3 {
            let v = img[(ch % c) * plane + p];
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}
