//! End-to-end experiment steps shared by the command-line tool and the
//! acceptance suite.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{self, BiasedSplits, LabeledDataset};
use crate::error::{Error, Result};
use crate::io::MetricRow;
use crate::masking::{self, MaskedDataset, RandomMaskMode};
use crate::nn::NetworkSpec;
use crate::trainer::{self, Evaluation, TrainedModel};

/// Environment variable naming the directory with the four MNIST IDX files.
pub const MNIST_DIR_ENV: &str = "MASKTUNE_MNIST_DIR";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// `$MASKTUNE_MNIST_DIR` if set, else `fallback`.
pub fn mnist_dir(fallback: &Path) -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV).map_or_else(|| fallback.to_path_buf(), PathBuf::from)
}

/// Raw 10-class train and test sets.
pub fn load_mnist(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let missing: Vec<&str> = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
        .into_iter()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!(
            "MNIST files {missing:?} not found in {} (set {MNIST_DIR_ENV} or data_dir)",
            dir.display()
        )));
    }
    let train = data::load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = data::load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok((train, test))
}

/// Biased splits as configured by `run`.
pub fn build_splits(run: &RunConfig, train_raw: &LabeledDataset, test_raw: &LabeledDataset) -> Result<BiasedSplits> {
    data::bias_splits(train_raw, test_raw, &run.biases(), &run.split)
}

pub fn network_for(run: &RunConfig, splits: &BiasedSplits) -> Result<NetworkSpec> {
    run.network(splits.train.image_shape(), 2)
}

/// Accuracy on the two test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestScores {
    pub original: Evaluation,
    pub biased: Evaluation,
}

pub fn score(model: &TrainedModel, splits: &BiasedSplits) -> Result<TestScores> {
    Ok(TestScores {
        original: trainer::evaluate(&model.spec, &model.params.weights, &splits.test_original)?,
        biased: trainer::evaluate(&model.spec, &model.params.weights, &splits.test_biased)?,
    })
}

/// Scores on both test sets plus metric rows for validation and both tests,
/// evaluating each split once.
pub fn eval_rows(stage: &str, model: &TrainedModel, splits: &BiasedSplits) -> Result<(TestScores, Vec<MetricRow>)> {
    let epoch = model.history.len().saturating_sub(1);
    let lr = model.history.last().map_or(0.0, |r| r.lr);
    let eval = |ds| trainer::evaluate(&model.spec, &model.params.weights, ds);
    let scores = TestScores {
        original: eval(&splits.test_original)?,
        biased: eval(&splits.test_biased)?,
    };
    let val = if splits.val.is_empty() { None } else { Some(eval(&splits.val)?) };
    let rows = [
        ("val", val.as_ref()),
        ("test_original", Some(&scores.original)),
        ("test_biased", Some(&scores.biased)),
    ]
    .into_iter()
    .filter_map(|(name, e)| {
        e.map(|e| MetricRow {
            stage: stage.into(),
            epoch,
            split: name.into(),
            loss: e.mean_loss,
            accuracy: e.accuracy,
            lr,
        })
    })
    .collect();
    Ok((scores, rows))
}

pub struct MasktuneRun {
    pub erm: TrainedModel,
    pub masked: MaskedDataset,
    pub finetuned: TrainedModel,
    pub erm_scores: TestScores,
    pub scores: TestScores,
    pub metrics: Vec<MetricRow>,
}

/// ERM, one round of saliency masking, one finetuning epoch, evaluation.
pub fn masktune(run: &RunConfig, splits: &BiasedSplits) -> Result<MasktuneRun> {
    let spec = network_for(run, splits)?;
    let erm = trainer::train_erm(&spec, &splits.train, &run.hyper)?;
    masktune_from(run, splits, erm)
}

/// As [`masktune`], reusing an already trained ERM model.
pub fn masktune_from(run: &RunConfig, splits: &BiasedSplits, erm: TrainedModel) -> Result<MasktuneRun> {
    let masked = masking::build_masked_dataset(&erm.spec, &erm.params.weights, &splits.train, &run.masking)?;
    let finetuned = trainer::finetune_masked(&erm, &masked.dataset, run.finetune_lr)?;
    let mut metrics = MetricRow::from_history(&finetuned);
    let (erm_scores, rows) = eval_rows("erm", &erm, splits)?;
    metrics.extend(rows);
    let (scores, rows) = eval_rows("masktune", &finetuned, splits)?;
    metrics.extend(rows);
    Ok(MasktuneRun {
        erm_scores,
        scores,
        erm,
        masked,
        finetuned,
        metrics,
    })
}

/// Finetunes `erm` on randomly windowed copies of the training set.
pub fn random_mask_baseline(erm: &TrainedModel, splits: &BiasedSplits, mode: RandomMaskMode, seed: u64) -> Result<(TrainedModel, TestScores)> {
    let masked = masking::random_masked_dataset(&splits.train, mode, seed)?;
    let tuned = trainer::finetune_masked(erm, &masked.dataset, None)?;
    let scores = score(&tuned, splits)?;
    Ok((tuned, scores))
}

pub struct IterativeRun {
    pub outcome: trainer::IterativeOutcome,
    pub scores: TestScores,
    /// Training history of the final model followed by its evaluation rows.
    pub metrics: Vec<MetricRow>,
}

pub fn iterate(run: &RunConfig, splits: &BiasedSplits, erm: &TrainedModel) -> Result<IterativeRun> {
    let outcome = trainer::iterate_masktune(erm, &splits.train, &run.iterative())?;
    let mut metrics = MetricRow::from_history(&outcome.model);
    let (scores, rows) = eval_rows("iterative", &outcome.model, splits)?;
    metrics.extend(rows);
    Ok(IterativeRun { outcome, scores, metrics })
}
