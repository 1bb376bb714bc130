//! Heatmap thresholding, masked-dataset construction, mask accumulation
//! and random-masking baselines.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, ParamSet};
use crate::saliency::{self, CamMethod, Heatmap};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdPolicy {
    /// `τ = μ_i + k·σ_i` over this sample's upsampled map.
    MeanPlusKSigma(u8),
    /// `τ` = mean over every training heatmap value.
    GlobalMean,
    /// Mask exactly the `K` highest values.
    TopK(usize),
    /// No threshold: `x̂ = (1 − minmax(map)) ⊙ x`.
    Soft,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::MeanPlusKSigma(2)
    }
}

impl std::str::FromStr for ThresholdPolicy {
    type Err = Error;

    /// Accepts `mean`, `mean+1sigma` … `mean+3sigma`, `global-mean`, `topk:K`, `soft`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown masking policy `{s}`"));
        match s {
            "mean" => Ok(ThresholdPolicy::MeanPlusKSigma(0)),
            "global-mean" => Ok(ThresholdPolicy::GlobalMean),
            "soft" => Ok(ThresholdPolicy::Soft),
            _ => {
                if let Some(k) = s.strip_prefix("topk:") {
                    return k.parse().map(ThresholdPolicy::TopK).map_err(|_| bad());
                }
                let k = s.strip_prefix("mean+").and_then(|r| r.strip_suffix("sigma")).ok_or_else(bad)?;
                k.parse().map(ThresholdPolicy::MeanPlusKSigma).map_err(|_| bad())
            }
        }
    }
}

impl std::fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdPolicy::MeanPlusKSigma(0) => write!(f, "mean"),
            ThresholdPolicy::MeanPlusKSigma(k) => write!(f, "mean+{k}sigma"),
            ThresholdPolicy::GlobalMean => write!(f, "global-mean"),
            ThresholdPolicy::TopK(k) => write!(f, "topk:{k}"),
            ThresholdPolicy::Soft => write!(f, "soft"),
        }
    }
}

/// Per-pixel keep weights on the input grid: `1` keep, `0` masked.
/// Only the soft policy produces values strictly between.
#[derive(Clone, Debug, PartialEq)]
pub struct KeepMask {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl KeepMask {
    pub fn keep_all(h: usize, w: usize) -> Self {
        KeepMask {
            h,
            w,
            values: vec![1.0; h * w],
        }
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn kept(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    /// Total masked weight (pixel count for binary masks).
    pub fn masked_area(&self) -> f64 {
        self.values.iter().map(|v| 1.0 - v).sum()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_area() / self.values.len() as f64
    }
}

/// Population mean and standard deviation. A constant input yields exactly
/// `(value, 0.0)`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if let Some(&first) = values.first() {
        if values.iter().all(|&v| v == first) {
            return (first, 0.0);
        }
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Threshold for one upsampled heatmap; `None` for the soft policy.
/// `global_mean` is required for [`ThresholdPolicy::GlobalMean`].
pub fn threshold(h_up: &Heatmap, policy: ThresholdPolicy, global_mean: Option<f64>) -> Result<Option<f64>> {
    match policy {
        ThresholdPolicy::MeanPlusKSigma(k) => {
            let (mu, sigma) = mean_std(&h_up.values);
            Ok(Some(mu + f64::from(k) * sigma))
        }
        ThresholdPolicy::GlobalMean => global_mean
            .map(Some)
            .ok_or_else(|| Error::Config("global-mean policy needs the dataset mean".into())),
        ThresholdPolicy::TopK(k) => {
            if k == 0 || k > h_up.values.len() {
                return Err(Error::Config(format!(
                    "topk K={k} outside 1..={}",
                    h_up.values.len()
                )));
            }
            let mut sorted = h_up.values.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            Ok(Some(sorted[k - 1]))
        }
        ThresholdPolicy::Soft => Ok(None),
    }
}

/// Keeps pixels whose value is `≤ τ`.
pub fn mask_at(h_up: &Heatmap, tau: f64) -> KeepMask {
    KeepMask {
        h: h_up.h,
        w: h_up.w,
        values: h_up.values.iter().map(|&v| if v <= tau { 1.0 } else { 0.0 }).collect(),
    }
}

/// Builds the keep-mask for one upsampled heatmap. Returns the mask and τ.
pub fn keep_mask(h_up: &Heatmap, policy: ThresholdPolicy, global_mean: Option<f64>) -> Result<(KeepMask, Option<f64>)> {
    let tau = threshold(h_up, policy, global_mean)?;
    let mask = match (policy, tau) {
        (ThresholdPolicy::TopK(k), _) => {
            let mut order: Vec<usize> = (0..h_up.values.len()).collect();
            // Highest first; equal values mask the lower flat index first.
            order.sort_by(|&a, &b| h_up.values[b].total_cmp(&h_up.values[a]).then(a.cmp(&b)));
            let mut values = vec![1.0; h_up.values.len()];
            for &i in &order[..k] {
                values[i] = 0.0;
            }
            KeepMask {
                h: h_up.h,
                w: h_up.w,
                values,
            }
        }
        (_, Some(t)) => mask_at(h_up, t),
        (_, None) => {
            let (lo, hi) = (h_up.min(), h_up.max());
            let values = if hi > lo {
                h_up.values.iter().map(|&v| 1.0 - (v - lo) / (hi - lo)).collect()
            } else {
                vec![1.0; h_up.values.len()]
            };
            KeepMask {
                h: h_up.h,
                w: h_up.w,
                values,
            }
        }
    };
    Ok((mask, tau))
}

/// `mask ⊙ x` for a `[C, H, W]` image. Masked pixels become exactly `0.0`;
/// kept pixels are copied bit for bit.
pub fn apply_mask(x: &[f64], mask: &KeepMask) -> Result<Vec<f64>> {
    let plane = mask.h * mask.w;
    if plane == 0 || x.len() % plane != 0 {
        return Err(Error::Input(format!(
            "image of {} values does not match a {}x{} mask",
            x.len(),
            mask.h,
            mask.w
        )));
    }
    Ok(x
        .chunks_exact(plane)
        .flat_map(|ch| {
            ch.iter().zip(&mask.values).map(|(&v, &m)| {
                if m == 1.0 {
                    v
                } else if m == 0.0 {
                    0.0
                } else {
                    v * m
                }
            })
        })
        .collect())
}

/// Elementwise AND (minimum for soft weights).
pub fn accumulate(prev: &KeepMask, next: &KeepMask) -> Result<KeepMask> {
    if prev.h != next.h || prev.w != next.w {
        return Err(Error::Input(format!(
            "cannot combine {}x{} and {}x{} masks",
            prev.h, prev.w, next.h, next.w
        )));
    }
    Ok(KeepMask {
        h: prev.h,
        w: prev.w,
        values: prev.values.iter().zip(&next.values).map(|(a, b)| a.min(*b)).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub policy: ThresholdPolicy,
    pub method: CamMethod,
    pub grid: MaskGrid,
    /// Samples per saliency batch.
    pub batch_size: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            policy: ThresholdPolicy::default(),
            method: CamMethod::default(),
            grid: MaskGrid::default(),
            batch_size: 256,
        }
    }
}

/// Resolution at which heatmaps are thresholded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskGrid {
    /// Bilinearly upsample the heatmap, then threshold per pixel.
    #[default]
    Input,
    /// Threshold at feature-map resolution, then blow each cell up to the
    /// input pixels it covers.
    Feature,
}

impl std::str::FromStr for MaskGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(MaskGrid::Input),
            "feature" => Ok(MaskGrid::Feature),
            _ => Err(Error::Config(format!("unknown mask grid `{s}` (input|feature)"))),
        }
    }
}

impl std::fmt::Display for MaskGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskGrid::Input => "input",
            MaskGrid::Feature => "feature",
        })
    }
}

/// Nearest-cell enlargement: pixel `(u, v)` takes cell `(⌊u·h'/h⌋, ⌊v·w'/w⌋)`.
pub fn expand_mask(mask: &KeepMask, h: usize, w: usize) -> Result<KeepMask> {
    if h < mask.h || w < mask.w {
        return Err(Error::Input(format!(
            "cannot expand a {}x{} mask to {h}x{w}",
            mask.h, mask.w
        )));
    }
    let mut values = Vec::with_capacity(h * w);
    for u in 0..h {
        let r = u * mask.h / h;
        for v in 0..w {
            values.push(mask.values[r * mask.w + v * mask.w / w]);
        }
    }
    Ok(KeepMask { h, w, values })
}

/// One mask per sample plus the statistics used to build it.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<KeepMask>,
    /// `None` under the soft policy.
    pub taus: Vec<Option<f64>>,
    /// Class each heatmap explained.
    pub targets: Vec<usize>,
    pub global_mean: Option<f64>,
}

impl MaskSet {
    pub fn mean_masked_area(&self) -> f64 {
        self.masks.iter().map(KeepMask::masked_area).sum::<f64>() / self.masks.len().max(1) as f64
    }
}

fn for_each_heatmap<F>(spec: &NetworkSpec, params: &ParamSet, ds: &LabeledDataset, cfg: &MaskingConfig, mut f: F) -> Result<()>
where
    F: FnMut(usize, Heatmap, usize) -> Result<()>,
{
    let [_, h, w] = ds.image_shape();
    let bs = cfg.batch_size.max(1);
    let mut start = 0;
    while start < ds.len() {
        let idx: Vec<usize> = (start..(start + bs).min(ds.len())).collect();
        let batch = ds.images.gather_outer(&idx);
        let (maps, targets) = saliency::cam_batch(spec, params, &batch, cfg.method).map_err(|e| e.at_sample(start))?;
        for ((i, m), t) in idx.into_iter().zip(maps).zip(targets) {
            let m = match cfg.grid {
                MaskGrid::Input => saliency::upsample(&m, h, w).map_err(|e| e.at_sample(i))?,
                MaskGrid::Feature => m,
            };
            f(i, m, t)?;
        }
        start += bs;
    }
    Ok(())
}

/// Saliency masks for every sample of `inputs`, in order.
pub fn compute_masks(spec: &NetworkSpec, params: &ParamSet, inputs: &LabeledDataset, cfg: &MaskingConfig) -> Result<MaskSet> {
    let global_mean = if cfg.policy == ThresholdPolicy::GlobalMean {
        let (mut sum, mut count) = (0.0, 0usize);
        for_each_heatmap(spec, params, inputs, cfg, |_, m, _| {
            sum += m.values.iter().sum::<f64>();
            count += m.values.len();
            Ok(())
        })?;
        Some(sum / count.max(1) as f64)
    } else {
        None
    };
    let [_, h, w] = inputs.image_shape();
    let mut set = MaskSet {
        masks: Vec::with_capacity(inputs.len()),
        taus: Vec::with_capacity(inputs.len()),
        targets: Vec::with_capacity(inputs.len()),
        global_mean,
    };
    for_each_heatmap(spec, params, inputs, cfg, |i, m, t| {
        let (mask, tau) = keep_mask(&m, cfg.policy, global_mean).map_err(|e| e.at_sample(i))?;
        let mask = if (mask.h, mask.w) == (h, w) { mask } else { expand_mask(&mask, h, w)? };
        set.masks.push(mask);
        set.taus.push(tau);
        set.targets.push(t);
        Ok(())
    })?;
    Ok(set)
}

/// Applies one mask per sample to `raw`; labels and metadata are unchanged.
pub fn apply_masks(raw: &LabeledDataset, masks: &[KeepMask]) -> Result<LabeledDataset> {
    if masks.len() != raw.len() {
        return Err(Error::Input(format!("{} masks for {} samples", masks.len(), raw.len())));
    }
    let mut data = Vec::with_capacity(raw.images.len());
    for (i, m) in masks.iter().enumerate() {
        data.extend(apply_mask(raw.image(i), m).map_err(|e| e.at_sample(i))?);
    }
    LabeledDataset::new(
        Tensor::new(raw.images.shape().to_vec(), data)?,
        raw.labels.clone(),
        raw.meta.clone(),
    )
}

/// A masked training set with its masks and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedDataset {
    pub dataset: LabeledDataset,
    pub masks: MaskSet,
    /// Masking rounds that produced these masks (1 for plain masking).
    pub iteration: usize,
}

/// Masks the most salient region of every sample under `params`.
pub fn build_masked_dataset(
    spec: &NetworkSpec,
    params: &ParamSet,
    ds: &LabeledDataset,
    cfg: &MaskingConfig,
) -> Result<MaskedDataset> {
    let masks = compute_masks(spec, params, ds, cfg)?;
    let dataset = apply_masks(ds, &masks.masks)?;
    Ok(MaskedDataset {
        dataset,
        masks,
        iteration: 1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RandomMaskMode {
    /// Square of (approximately) this many pixels at a uniform position.
    FixedArea(f64),
    /// Side drawn uniformly from `2..=min(H, W)/2`, then a uniform position.
    RandomWindow,
}

/// Zeroes a `side × side` window with top-left corner at `(top, left)`.
pub fn window_mask(h: usize, w: usize, top: usize, left: usize, side: usize) -> Result<KeepMask> {
    if side == 0 || top + side > h || left + side > w {
        return Err(Error::Input(format!(
            "window {side}x{side} at ({top}, {left}) does not fit {h}x{w}"
        )));
    }
    let mut m = KeepMask::keep_all(h, w);
    for r in top..top + side {
        m.values[r * w + left..r * w + left + side].fill(0.0);
    }
    Ok(m)
}

pub fn random_mask<R: Rng>(h: usize, w: usize, rng: &mut R, mode: RandomMaskMode) -> Result<KeepMask> {
    let lim = h.min(w);
    let side = match mode {
        RandomMaskMode::FixedArea(area) => (area.max(0.0).sqrt().round() as usize).clamp(1, lim),
        RandomMaskMode::RandomWindow => {
            let hi = lim / 2;
            if hi < 2 {
                return Err(Error::Input(format!("image {h}x{w} too small for random windows")));
            }
            rng.random_range(2..=hi)
        }
    };
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..=w - side);
    window_mask(h, w, top, left, side)
}

/// Random-window baseline over a whole dataset, seeded.
pub fn random_masked_dataset(ds: &LabeledDataset, mode: RandomMaskMode, seed: u64) -> Result<MaskedDataset> {
    let [_, h, w] = ds.image_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks: Vec<KeepMask> = (0..ds.len())
        .map(|_| random_mask(h, w, &mut rng, mode))
        .collect::<Result<_>>()?;
    let dataset = apply_masks(ds, &masks)?;
    Ok(MaskedDataset {
        dataset,
        masks: MaskSet {
            taus: vec![None; masks.len()],
            targets: ds.labels.clone(),
            masks,
            global_mean: None,
        },
        iteration: 1,
    })
}
