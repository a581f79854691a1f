//! Per-point anomaly scores and point-adjusted best-F1 evaluation.
//!
//! A point `t` gets a score once a full window ends at it (`t >= W - 1`).
//! Its terms are the reconstruction error of the last row of the window
//! ending at `t`, the error of the forecast made for `t` by the window ending
//! at `t - 1`, and the error of the backcast made for `t` by the window that
//! starts at `t + 1`. Terms that do not exist near the series edges, or when
//! prediction is disabled, are left out of the sum.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{apply_normalize, DataError, RawSeries};
use crate::model::ModelError;
use crate::numcore::Tensor;
use crate::objective::{anomaly_score, LossWeights};
use crate::training::ModelBundle;
pub use crate::training::ScoreHorizon;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test series has {len} points, shorter than the window of {window}")]
    TooShort { len: usize, window: usize },
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("no scores to evaluate")]
    Empty,
    #[error("test series has no labels")]
    NoLabels,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Scores for timestamps `start..start + scores.len()`, with their terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub start: usize,
    pub scores: Vec<f64>,
    pub rec: Vec<f64>,
    pub pred_fwd: Vec<Option<f64>>,
    pub pred_back: Vec<Option<f64>>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Timestamp of entry `i`.
    pub fn timestamp(&self, i: usize) -> usize {
        self.start + i
    }

    /// Recombines the stored terms under other weights.
    pub fn reweighted(&self, weights: &LossWeights) -> ScoreSeries {
        let scores = (0..self.len())
            .map(|i| {
                anomaly_score(
                    self.rec[i],
                    self.pred_fwd[i].unwrap_or(0.0),
                    self.pred_back[i].unwrap_or(0.0),
                    weights,
                )
            })
            .collect();
        ScoreSeries {
            scores,
            ..self.clone()
        }
    }

    /// CSV with `timestamp,score,rec_term,pred_fwd_term,pred_back_term`;
    /// absent terms are empty fields. Floats use the shortest round-trip form.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["timestamp", "score", "rec_term", "pred_fwd_term", "pred_back_term"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for i in 0..self.len() {
            w.write_record([
                self.timestamp(i).to_string(),
                self.scores[i].to_string(),
                self.rec[i].to_string(),
                opt(self.pred_fwd[i]),
                opt(self.pred_back[i]),
            ])?;
        }
        w.flush().map_err(|e| EvalError::Csv(e.into()))?;
        Ok(())
    }
}

/// Windows scored per forward pass.
const SCORE_BATCH: usize = 128;

/// Scores a test series that is already normalized with the training stats.
pub fn score_series(
    bundle: &ModelBundle,
    test: &RawSeries,
    weights: &LossWeights,
    horizon: ScoreHorizon,
) -> Result<ScoreSeries> {
    let cfg = bundle.model.config();
    let (w, k, steps) = (cfg.window_size, cfg.n_vars, cfg.pred_step);
    let n = test.len();
    if n < w {
        return Err(EvalError::TooShort { len: n, window: w });
    }
    if test.n_vars() != k {
        return Err(DataError::VariableCount {
            expected: k,
            found: test.n_vars(),
        }
        .into());
    }
    let n_windows = n - w + 1;
    let mut last_rows = Vec::with_capacity(n_windows * k);
    let mut fwd = Vec::new();
    let mut back = Vec::new();
    for first in (0..n_windows).step_by(SCORE_BATCH) {
        let count = SCORE_BATCH.min(n_windows - first);
        let mut data = Vec::with_capacity(count * w * k);
        for i in first..first + count {
            data.extend_from_slice(test.rows(i, i + w));
        }
        let windows = Tensor::new(&[count, w, k], data).expect("sized");
        let out = bundle.model.infer(&windows)?;
        for b in 0..count {
            let off = (b * w + w - 1) * k;
            last_rows.extend_from_slice(&out.x_hat.data()[off..off + k]);
        }
        if let (Some(f), Some(bk)) = (out.pred_forward, out.pred_backward) {
            fwd.extend_from_slice(f.data());
            back.extend_from_slice(bk.data());
        }
    }
    let has_pred = !fwd.is_empty();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    // window i ends at i + w - 1; its step-j prediction (1-based) is at
    // offset ((i * steps) + j - 1) * k
    let pred_at = |buf: &[f64], i: usize, j: usize| {
        let off = (i * steps + j - 1) * k;
        buf[off..off + k].to_vec()
    };
    let start = w - 1;
    let mut out = ScoreSeries {
        start,
        scores: Vec::with_capacity(n_windows),
        rec: Vec::with_capacity(n_windows),
        pred_fwd: Vec::with_capacity(n_windows),
        pred_back: Vec::with_capacity(n_windows),
    };
    let horizon_steps = match horizon {
        ScoreHorizon::OneStep => 1,
        ScoreHorizon::Full => steps,
    };
    for i in 0..n_windows {
        let t = i + start;
        let x = test.row(t);
        let rec = dist(&last_rows[i * k..(i + 1) * k], x);
        let mean_of = |terms: Vec<f64>| (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64);
        let (f, b) = if has_pred {
            // forecasts for t come from windows ending at t - j
            let f: Vec<f64> = (1..=horizon_steps)
                .filter(|&j| i >= j)
                .map(|j| dist(&pred_at(&fwd, i - j, j), x))
                .collect();
            // backcasts for t come from windows ending at t + w + j - 1
            let b: Vec<f64> = (1..=horizon_steps)
                .map(|j| i + w + j - 1)
                .take_while(|&e| e < n_windows)
                .enumerate()
                .map(|(jm1, e)| dist(&pred_at(&back, e, jm1 + 1), x))
                .collect();
            (mean_of(f), mean_of(b))
        } else {
            (None, None)
        };
        out.scores.push(anomaly_score(rec, f.unwrap_or(0.0), b.unwrap_or(0.0), weights));
        out.rec.push(rec);
        out.pred_fwd.push(f);
        out.pred_back.push(b);
    }
    Ok(out)
}

/// Normalizes a raw test series with the bundle's statistics and scores it
/// with the bundle's configured weights and horizon.
pub fn score_raw(bundle: &ModelBundle, raw: &RawSeries) -> Result<ScoreSeries> {
    let normalized = apply_normalize(raw, &bundle.stats)?;
    score_series(bundle, &normalized, &bundle.config.weights(), bundle.config.score_horizon)
}

/// Marks every truth segment as detected if any of its points is predicted.
pub fn point_adjust(pred: &[bool], truth: &[bool]) -> Result<Vec<bool>> {
    if pred.len() != truth.len() {
        return Err(EvalError::Length {
            left: pred.len(),
            right: truth.len(),
        });
    }
    let mut out = pred.to_vec();
    for (s, e) in segments(truth) {
        if pred[s..e].iter().any(|&p| p) {
            out[s..e].iter_mut().for_each(|p| *p = true);
        }
    }
    Ok(out)
}

/// Maximal runs of `true` as half-open ranges.
pub fn segments(truth: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < truth.len() {
        if truth[i] {
            let s = i;
            while i < truth.len() && truth[i] {
                i += 1;
            }
            out.push((s, i));
        } else {
            i += 1;
        }
    }
    out
}

/// Precision, recall and F1 at the best threshold, with the confusion counts
/// after point adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Points with `score >= threshold` are flagged. `inf` flags nothing.
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

impl EvalReport {
    /// Metrics from adjusted confusion counts. Undefined ratios are 0.
    pub fn from_counts(threshold: f64, tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            threshold,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            true_negatives: tn,
        }
    }
}

/// Point-adjusted metrics at one threshold.
pub fn evaluate_at(scores: &[f64], truth: &[bool], threshold: f64) -> Result<EvalReport> {
    let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let adjusted = point_adjust(&pred, truth)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in adjusted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(EvalReport::from_counts(threshold, tp, fp, fn_, tn))
}

/// Best point-adjusted F1 over every distinct score used as a threshold,
/// plus `inf`. Ties go to the largest threshold.
///
/// Runs in `O(n log n)`: lowering the threshold past a score can only add a
/// false positive or detect the segment whose maximum that score is.
pub fn best_f1(scores: &[f64], truth: &[bool]) -> Result<EvalReport> {
    if scores.len() != truth.len() {
        return Err(EvalError::Length {
            left: scores.len(),
            right: truth.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = scores.len();
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        log::warn!("no anomalous points in the evaluation range; F1 is reported as 0");
    }
    // (score, positives detected, false positives added)
    let mut events: Vec<(f64, usize, usize)> = Vec::new();
    for (s, e) in segments(truth) {
        let max = scores[s..e].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        events.push((max, e - s, 0));
    }
    for (i, &s) in scores.iter().enumerate() {
        if !truth[i] {
            events.push((s, 0, 1));
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut best = EvalReport::from_counts(f64::INFINITY, 0, 0, positives, n - positives);
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < events.len() {
        let threshold = events[i].0;
        while i < events.len() && events[i].0 == threshold {
            tp += events[i].1;
            fp += events[i].2;
            i += 1;
        }
        let report = EvalReport::from_counts(threshold, tp, fp, positives - tp, n - positives - fp);
        if report.f1 > best.f1 {
            best = report;
        }
    }
    Ok(best)
}

/// Best F1 over the scored range of a labelled series.
pub fn best_f1_series(scores: &ScoreSeries, labels: &[bool]) -> Result<EvalReport> {
    let end = scores.start + scores.len();
    if labels.len() != end {
        return Err(EvalError::Length {
            left: labels.len(),
            right: end,
        });
    }
    best_f1(&scores.scores, &labels[scores.start..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn adjust_fills_a_detected_segment() {
        let truth = [false, false, false, true, true, true, false];
        let pred = [false, false, false, false, true, false, false];
        let adj = point_adjust(&pred, &truth).unwrap();
        assert_eq!(adj, vec![false, false, false, true, true, true, false]);
        assert_eq!(point_adjust(&[false; 7], &truth).unwrap(), vec![false; 7]);
        assert!(point_adjust(&[false; 6], &truth).is_err());
    }

    #[test]
    fn three_point_example() {
        let r = best_f1(&[0.1, 0.9, 0.2], &[false, true, false]).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.threshold, 0.9);
        assert_eq!((r.true_positives, r.false_positives, r.false_negatives, r.true_negatives), (1, 0, 0, 2));
    }

    #[test]
    fn all_true_truth_has_full_recall() {
        let r = best_f1(&[0.3, 0.1, 0.7], &[true; 3]).unwrap();
        assert_eq!((r.recall, r.f1, r.threshold), (1.0, 1.0, 0.7));
        assert_eq!(evaluate_at(&[0.3, 0.1, 0.7], &[true; 3], 0.1).unwrap().recall, 1.0);
    }

    #[test]
    fn all_false_truth_gives_zero() {
        let r = best_f1(&[0.3, 0.1], &[false, false]).unwrap();
        assert_eq!((r.f1, r.precision, r.recall), (0.0, 0.0, 0.0));
        assert!(best_f1(&[], &[]).is_err());
    }

    #[test]
    fn reweighting_recombines_terms() {
        let s = ScoreSeries {
            start: 3,
            scores: vec![0.0, 0.0],
            rec: vec![0.5, 1.0],
            pred_fwd: vec![Some(0.2), None],
            pred_back: vec![Some(1.0), Some(2.0)],
        };
        let w = LossWeights {
            lambda: 1.0,
            gamma1: 2.0,
            gamma2: 0.1,
        };
        let r = s.reweighted(&w);
        assert!((r.scores[0] - 1.0).abs() < 1e-12);
        assert!((r.scores[1] - 1.2).abs() < 1e-12);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "timestamp,score,rec_term,pred_fwd_term,pred_back_term");
        assert_eq!(text.lines().nth(2).unwrap(), "4,1.2,1,,2");
    }

    fn labelled(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (
            proptest::collection::vec(0u8..20, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 4.0).collect()),
            proptest::collection::vec(proptest::bool::weighted(0.3), n),
        )
    }

    proptest! {
        #[test]
        fn best_f1_ignores_monotone_transforms((scores, truth) in labelled(60)) {
            let a = best_f1(&scores, &truth).unwrap();
            let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            let b = best_f1(&moved, &truth).unwrap();
            prop_assert_eq!(a.f1, b.f1);
            prop_assert_eq!(a.true_positives, b.true_positives);
            prop_assert_eq!(a.false_positives, b.false_positives);
        }

        #[test]
        fn extra_false_alarm_never_raises_precision(
            (scores, truth) in labelled(60),
            threshold in 0.0f64..5.0,
        ) {
            let Some(i) = truth.iter().position(|&t| !t) else { return Ok(()); };
            let before = evaluate_at(&scores, &truth, threshold).unwrap();
            let mut raised = scores.clone();
            raised[i] = threshold + 1.0;
            let after = evaluate_at(&raised, &truth, threshold).unwrap();
            prop_assert!(after.precision <= before.precision || before.true_positives + before.false_positives == 0);
        }
    }
}
