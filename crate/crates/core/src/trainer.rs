//! ERM training, single-epoch finetuning on masked data, the iterative
//! variant, and top-1 evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::masking::{self, KeepMask, MaskingConfig};
use crate::nn::{self, Hyperparams, NetworkParams, NetworkSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub lr: f64,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Initial,
    Finetuned { iterations: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
    pub hyper: Hyperparams,
    /// ERM epochs followed by one record per finetuning epoch.
    pub history: Vec<EpochRecord>,
    /// Last learning rate of the ERM schedule.
    pub final_lr: f64,
    pub stage: Stage,
}

impl TrainedModel {
    pub fn finetune_iterations(&self) -> usize {
        match self.stage {
            Stage::Initial => 0,
            Stage::Finetuned { iterations } => iterations,
        }
    }
}

fn check_dataset(spec: &NetworkSpec, ds: &LabeledDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if ds.image_shape() != spec.input {
        return Err(Error::shape(
            0,
            format!("images are {:?}, network expects {:?}", ds.image_shape(), spec.input),
        ));
    }
    if let Some(&y) = ds.labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::Input(format!("label {y} outside the {} network classes", spec.num_classes)));
    }
    Ok(())
}

/// One shuffled pass of mini-batch SGD at a fixed learning rate.
fn run_epoch(
    spec: &NetworkSpec,
    params: &mut NetworkParams,
    ds: &LabeledDataset,
    hyper: &Hyperparams,
    lr: f64,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochRecord> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    let (mut loss_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
    for (b, idx) in order.chunks(hyper.batch_size).enumerate() {
        let batch = ds.images.gather_outer(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let g = nn::gradients(spec, &params.weights, &batch, &labels)?;
        if !g.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: b,
                loss: g.loss,
            });
        }
        loss_sum += g.loss * idx.len() as f64;
        correct += g
            .logits
            .data()
            .chunks_exact(spec.num_classes)
            .zip(&labels)
            .filter(|(row, &y)| nn::argmax(row) == Some(y))
            .count();
        nn::sgd_step(params, &g.params, lr, hyper.momentum, hyper.weight_decay)?;
        steps += 1;
    }
    Ok(EpochRecord {
        epoch,
        train_loss: loss_sum / ds.len() as f64,
        train_acc: correct as f64 / ds.len() as f64,
        lr,
        steps,
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Empirical risk minimization with step-decayed momentum SGD.
pub fn train_erm(spec: &NetworkSpec, train: &LabeledDataset, hyper: &Hyperparams) -> Result<TrainedModel> {
    train_erm_with(spec, train, hyper, |_| {})
}

/// As [`train_erm`], calling `on_epoch` after every epoch.
pub fn train_erm_with<F>(spec: &NetworkSpec, train: &LabeledDataset, hyper: &Hyperparams, mut on_epoch: F) -> Result<TrainedModel>
where
    F: FnMut(&EpochRecord),
{
    hyper.validate()?;
    check_dataset(spec, train)?;
    let mut params = NetworkParams::init(spec, hyper.seed)?;
    let mut rng = stream_rng(hyper.seed, 1);
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let lr = nn::lr_at_epoch(hyper, epoch);
        let rec = run_epoch(spec, &mut params, train, hyper, lr, epoch, &mut rng)?;
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainedModel {
        spec: spec.clone(),
        params,
        hyper: hyper.clone(),
        history,
        final_lr: nn::lr_at_epoch(hyper, hyper.epochs - 1),
        stage: Stage::Initial,
    })
}

/// One epoch over `masked` at the final ERM learning rate (or `lr_override`),
/// starting from zeroed momentum.
pub fn finetune_masked(model: &TrainedModel, masked: &LabeledDataset, lr_override: Option<f64>) -> Result<TrainedModel> {
    if let Some(lr) = lr_override {
        // Zero is accepted: it turns finetuning into a no-op.
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("finetune learning rate must be nonnegative, got {lr}")));
        }
    }
    check_dataset(&model.spec, masked)?;
    let done = model.finetune_iterations();
    let lr = lr_override.unwrap_or(model.final_lr);
    let mut params = model.params.clone();
    params.reset_momentum();
    let mut rng = stream_rng(model.hyper.seed, 1000 + done as u64);
    let epoch = model.history.len();
    let rec = run_epoch(&model.spec, &mut params, masked, &model.hyper, lr, epoch, &mut rng)?;
    let mut history = model.history.clone();
    history.push(rec);
    Ok(TrainedModel {
        spec: model.spec.clone(),
        params,
        hyper: model.hyper.clone(),
        history,
        final_lr: model.final_lr,
        stage: Stage::Finetuned { iterations: done + 1 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `None` for classes absent from the set.
    pub per_class_accuracy: Vec<Option<f64>>,
}

/// Logits for every sample, batched.
pub fn predict_logits(spec: &NetworkSpec, params: &nn::ParamSet, ds: &LabeledDataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.len() * spec.num_classes);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(256) {
        out.extend_from_slice(nn::logits(spec, params, &ds.images.gather_outer(chunk))?.data());
    }
    Ok(out)
}

/// Top-1 accuracy, mean cross-entropy and per-class accuracy on `ds` as given.
pub fn evaluate(spec: &NetworkSpec, params: &nn::ParamSet, ds: &LabeledDataset) -> Result<Evaluation> {
    let k = spec.num_classes;
    if let Some(&y) = ds.labels.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!("label {y} outside the {k} network classes")));
    }
    if ds.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let logits = predict_logits(spec, params, ds)?;
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    let mut loss = 0.0;
    for (row, &y) in logits.chunks_exact(k).zip(&ds.labels) {
        totals[y] += 1;
        if nn::argmax(row) == Some(y) {
            hits[y] += 1;
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        loss += m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y];
    }
    let n = ds.len();
    Ok(Evaluation {
        n,
        accuracy: hits.iter().sum::<usize>() as f64 / n as f64,
        mean_loss: loss / n as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterativeConfig {
    pub iterations: usize,
    /// AND each round's masks with all earlier ones.
    pub accumulative: bool,
    pub masking: MaskingConfig,
    /// Stop once accuracy on the masked training set drops below this.
    pub stop_floor: f64,
    pub lr_override: Option<f64>,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        IterativeConfig {
            iterations: 1,
            accumulative: true,
            masking: MaskingConfig::default(),
            stop_floor: 0.55,
            lr_override: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean fraction of pixels kept by the masks applied this round.
    pub kept_fraction: f64,
    pub masked_train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct IterativeOutcome {
    pub model: TrainedModel,
    pub records: Vec<IterationRecord>,
    /// Masks applied in the last completed round.
    pub masks: Vec<KeepMask>,
    pub stopped_early: bool,
}

/// Repeated mask-then-finetune rounds starting from an ERM model.
///
/// Each round explains the current training inputs (the previous round's
/// masked images when accumulating, the raw images otherwise), then applies
/// the new masks, ANDed with every earlier mask when accumulating, to the
/// raw images and finetunes for one epoch.
pub fn iterate_masktune(initial: &TrainedModel, raw: &LabeledDataset, cfg: &IterativeConfig) -> Result<IterativeOutcome> {
    iterate_masktune_with(initial, raw, cfg, |_| {})
}

pub fn iterate_masktune_with<F>(
    initial: &TrainedModel,
    raw: &LabeledDataset,
    cfg: &IterativeConfig,
    mut on_iteration: F,
) -> Result<IterativeOutcome>
where
    F: FnMut(&IterationRecord),
{
    if cfg.iterations == 0 {
        return Err(Error::Config("iterations must be at least 1".into()));
    }
    let [_, h, w] = raw.image_shape();
    let mut model = initial.clone();
    let mut current = raw.clone();
    let mut masks = vec![KeepMask::keep_all(h, w); raw.len()];
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut stopped_early = false;
    for it in 1..=cfg.iterations {
        let step = || -> Result<(TrainedModel, LabeledDataset, Vec<KeepMask>, IterationRecord)> {
            let inputs = if cfg.accumulative { &current } else { raw };
            let fresh = masking::compute_masks(&model.spec, &model.params.weights, inputs, &cfg.masking)?;
            let applied = if cfg.accumulative {
                masks
                    .iter()
                    .zip(&fresh.masks)
                    .map(|(a, b)| masking::accumulate(a, b))
                    .collect::<Result<Vec<_>>>()?
            } else {
                fresh.masks
            };
            let masked = masking::apply_masks(raw, &applied)?;
            let next = finetune_masked(&model, &masked, cfg.lr_override)?;
            let acc = evaluate(&next.spec, &next.params.weights, &masked)?.accuracy;
            let kept = applied.iter().map(|m| 1.0 - m.masked_fraction()).sum::<f64>() / applied.len() as f64;
            let rec = IterationRecord {
                iteration: it,
                kept_fraction: kept,
                masked_train_accuracy: acc,
            };
            Ok((next, masked, applied, rec))
        };
        let (next, masked, applied, rec) = step().map_err(|e| e.at_iteration(it))?;
        on_iteration(&rec);
        model = next;
        current = masked;
        masks = applied;
        let below = rec.masked_train_accuracy < cfg.stop_floor;
        records.push(rec);
        if below && it < cfg.iterations {
            stopped_early = true;
            break;
        }
    }
    Ok(IterativeOutcome {
        model,
        records,
        masks,
        stopped_early,
    })
}

/// Trains ERM, then runs [`iterate_masktune`].
pub fn iterative_masktune(
    spec: &NetworkSpec,
    train: &LabeledDataset,
    hyper: &Hyperparams,
    cfg: &IterativeConfig,
) -> Result<IterativeOutcome> {
    let initial = train_erm(spec, train, hyper)?;
    iterate_masktune(&initial, train, cfg)
}
