//! Selective classification with a pair of models: predict only when the
//! product of their class probabilities is confident enough.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax_rows;

/// Per-sample prediction and confidence from two models' logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleScores {
    pub predictions: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Elementwise product of the two softmax distributions; the prediction is
/// its argmax (lowest index on ties) and the score its maximum.
pub fn ensemble_scores(logits_a: &[f64], logits_b: &[f64], num_classes: usize) -> Result<EnsembleScores> {
    if num_classes == 0 {
        return Err(Error::Input("num_classes must be positive".into()));
    }
    if logits_a.len() != logits_b.len() || logits_a.len() % num_classes != 0 {
        return Err(Error::Input(format!(
            "logit lengths {} and {} do not form rows of {num_classes}",
            logits_a.len(),
            logits_b.len()
        )));
    }
    let pa = softmax_rows(logits_a, num_classes);
    let pb = softmax_rows(logits_b, num_classes);
    let n = logits_a.len() / num_classes;
    let mut predictions = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for (ra, rb) in pa.chunks_exact(num_classes).zip(pb.chunks_exact(num_classes)) {
        let (mut best, mut top) = (0, f64::NEG_INFINITY);
        for (c, (a, b)) in ra.iter().zip(rb).enumerate() {
            let s = a * b;
            if s > top {
                best = c;
                top = s;
            }
        }
        predictions.push(best);
        scores.push(top);
    }
    Ok(EnsembleScores { predictions, scores })
}

/// Threshold `γ` so that predicting when `score > γ` covers roughly a
/// fraction `coverage` of `scores`: the `⌊(1 - coverage)·n⌋`-th smallest
/// score, or 0 when that count is zero.
pub fn calibrate_gamma(scores: &[f64], coverage: f64) -> Result<f64> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Config(format!("coverage must be in (0, 1], got {coverage}")));
    }
    if scores.is_empty() {
        return Err(Error::Input("cannot calibrate on an empty score set".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Input(format!("score {i} is not finite")));
    }
    let k = ((1.0 - coverage) * scores.len() as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return Ok(0.0);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectiveReport {
    pub gamma: f64,
    pub n: usize,
    pub covered: usize,
    pub coverage: f64,
    /// `None` when nothing is covered.
    pub selective_error: Option<f64>,
    pub abstained: Vec<usize>,
}

pub fn selective_eval(ens: &EnsembleScores, labels: &[usize], gamma: f64) -> Result<SelectiveReport> {
    if labels.len() != ens.scores.len() {
        return Err(Error::Input(format!(
            "{} labels for {} scored samples",
            labels.len(),
            ens.scores.len()
        )));
    }
    let mut abstained = Vec::new();
    let (mut covered, mut wrong) = (0usize, 0usize);
    for (i, ((&s, &p), &y)) in ens.scores.iter().zip(&ens.predictions).zip(labels).enumerate() {
        if s > gamma {
            covered += 1;
            wrong += usize::from(p != y);
        } else {
            abstained.push(i);
        }
    }
    let n = labels.len();
    Ok(SelectiveReport {
        gamma,
        n,
        covered,
        coverage: if n == 0 { 0.0 } else { covered as f64 / n as f64 },
        selective_error: (covered > 0).then(|| wrong as f64 / covered as f64),
        abstained,
    })
}

/// One calibrated operating point per requested coverage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub target: f64,
    pub report: SelectiveReport,
}

pub fn coverage_curve(
    val: &EnsembleScores,
    test: &EnsembleScores,
    test_labels: &[usize],
    targets: &[f64],
) -> Result<Vec<CoveragePoint>> {
    targets
        .iter()
        .map(|&t| {
            let gamma = calibrate_gamma(&val.scores, t)?;
            Ok(CoveragePoint {
                target: t,
                report: selective_eval(test, test_labels, gamma)?,
            })
        })
        .collect()
}

/// `target,gamma,coverage,selective_error` rows; an undefined error is written as `nan`.
pub fn write_curve_csv<W: Write>(mut out: W, points: &[CoveragePoint]) -> Result<()> {
    writeln!(out, "target,gamma,coverage,selective_error")?;
    for p in points {
        let err = p.report.selective_error.map_or_else(|| "nan".to_string(), |e| format!("{e:.6}"));
        writeln!(out, "{:.4},{:.9},{:.6},{err}", p.target, p.report.gamma, p.report.coverage)?;
    }
    Ok(())
}
