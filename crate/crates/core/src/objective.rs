//! Loss terms and the anomaly score.
//!
//! Each loss exists twice: as a plain function on tensors (used for reporting
//! and as an oracle in tests) and, in [`on_graph`], as a differentiable
//! composition of graph primitives used during training. Batched inputs carry
//! the batch on the leading axis and every loss is a batch mean.

use serde::{Deserialize, Serialize};

use crate::numcore::{Result, Tensor, TensorError};

/// Probabilities are clamped into `[ADV_EPS, 1 - ADV_EPS]` before the log.
pub const ADV_EPS: f64 = 1e-7;

/// Reconstruction weight and the forward/backward prediction weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [("lambda", self.lambda), ("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Horizon weighting of the prediction losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayWeighting {
    /// `(T - i) / T^2`: the farthest step gets weight zero and `T = 1`
    /// disables the loss.
    #[default]
    Literal,
    /// `(T - i + 1) / T^2`: every step contributes.
    Shifted,
}

/// Per-step weights for `i = 1..=T`.
pub fn decay_weights(steps: usize, weighting: DecayWeighting) -> Vec<f64> {
    let t = steps as f64;
    (1..=steps)
        .map(|i| {
            let w = match weighting {
                DecayWeighting::Literal => t - i as f64,
                DecayWeighting::Shifted => t - i as f64 + 1.0,
            };
            w / (t * t)
        })
        .collect()
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn batch_rows<'a>(t: &'a Tensor) -> impl Iterator<Item = &'a [f64]> {
    let batch = if t.shape().len() >= 2 { t.shape()[0] } else { 1 };
    let width = t.numel() / batch.max(1);
    t.data().chunks(width.max(1))
}

/// Euclidean norm of the flattened difference, averaged over the leading
/// (batch) axis. A 1-D tensor is one sample.
pub fn loss_rec(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    check_same("loss_rec", x, x_hat)?;
    let norms: Vec<f64> = batch_rows(x)
        .zip(batch_rows(x_hat))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .collect();
    Ok(norms.iter().sum::<f64>() / norms.len() as f64)
}

/// Discriminator and generator adversarial losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvLoss {
    /// `-(E[log D(x)] + E[log(1 - D(x_hat))])`
    pub d_loss: f64,
    /// `-E[log D(x_hat)]`
    pub g_loss: f64,
}

pub fn loss_adv(real_probs: &[f64], fake_probs: &[f64]) -> AdvLoss {
    let clamp = |p: f64| p.clamp(ADV_EPS, 1.0 - ADV_EPS);
    let mean = |it: &mut dyn Iterator<Item = f64>, n: usize| it.sum::<f64>() / n.max(1) as f64;
    let real = mean(&mut real_probs.iter().map(|&p| clamp(p).ln()), real_probs.len());
    let fake_neg = mean(&mut fake_probs.iter().map(|&p| (1.0 - clamp(p)).ln()), fake_probs.len());
    let fake_pos = mean(&mut fake_probs.iter().map(|&p| clamp(p).ln()), fake_probs.len());
    AdvLoss {
        d_loss: -(real + fake_neg),
        g_loss: -fake_pos,
    }
}

/// Weighted-decay prediction loss on `[T, K]` or `[B, T, K]` tensors:
/// `sum_i w_i * ||x_i - x~_i||`, batch-averaged. Targets are ordered nearest
/// step first, so the same function serves forward and backward prediction.
pub fn loss_pred(targets: &Tensor, preds: &Tensor, weighting: DecayWeighting) -> Result<f64> {
    check_same("loss_pred", targets, preds)?;
    let shape = targets.shape();
    let (batch, steps, k) = match *shape {
        [t, k] => (1, t, k),
        [b, t, k] => (b, t, k),
        _ => {
            return Err(TensorError::Invalid {
                op: "loss_pred",
                msg: format!("expected [T, K] or [B, T, K], got {shape:?}"),
            })
        }
    };
    if steps == 0 {
        return Err(TensorError::Invalid {
            op: "loss_pred",
            msg: "T must be at least 1".into(),
        });
    }
    let weights = decay_weights(steps, weighting);
    let mut total = 0.0;
    for b in 0..batch {
        for (i, w) in weights.iter().enumerate() {
            let off = (b * steps + i) * k;
            let d = targets.data()[off..off + k]
                .iter()
                .zip(&preds.data()[off..off + k])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            total += w * d;
        }
    }
    Ok(total / batch as f64)
}

/// Backward-prediction loss; identical formula with targets running back in
/// time from the window start.
pub fn loss_pred_back(targets: &Tensor, preds: &Tensor, weighting: DecayWeighting) -> Result<f64> {
    loss_pred(targets, preds, weighting)
}

/// Loss values of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub pred_fwd: f64,
    pub pred_back: f64,
    pub full: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.rec, self.adv_d, self.adv_g, self.pred_fwd, self.pred_back, self.full]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.rec += r.rec / n;
            m.adv_d += r.adv_d / n;
            m.adv_g += r.adv_g / n;
            m.pred_fwd += r.pred_fwd / n;
            m.pred_back += r.pred_back / n;
            m.full += r.full / n;
        }
        m
    }
}

/// `adv + lambda * rec + gamma1 * pred_fwd + gamma2 * pred_back`, with `adv`
/// the generator-side adversarial term.
pub fn loss_full(adv: f64, rec: f64, pred_fwd: f64, pred_back: f64, weights: &LossWeights) -> f64 {
    adv + weights.lambda * rec + weights.gamma1 * pred_fwd + weights.gamma2 * pred_back
}

/// Per-point anomaly score. Terms that are undefined for a point are passed
/// as zero.
pub fn anomaly_score(rec: f64, pred_fwd: f64, pred_back: f64, weights: &LossWeights) -> f64 {
    weights.lambda * rec + weights.gamma1 * pred_fwd + weights.gamma2 * pred_back
}

/// Differentiable versions of the losses.
pub mod on_graph {
    use super::{decay_weights, DecayWeighting, ADV_EPS};
    use crate::numcore::{Graph, Result, Tensor, TensorError, Var};

    /// Batch mean of per-sample Euclidean distance.
    pub fn rec(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
        if g.shape(x) != g.shape(x_hat) {
            return Err(TensorError::ShapeMismatch {
                op: "loss_rec",
                lhs: g.shape(x).to_vec(),
                rhs: g.shape(x_hat).to_vec(),
            });
        }
        let shape = g.shape(x).to_vec();
        let batch = shape[0];
        let width: usize = shape[1..].iter().product();
        let diff = g.sub(x, x_hat)?;
        let diff = g.reshape(diff, &[batch, width])?;
        let sq = g.square(diff)?;
        let ss = g.sum(sq, Some(1))?;
        let norms = g.sqrt(ss)?;
        g.mean(norms, None)
    }

    /// Weighted-decay loss on `[B, T, K]`.
    pub fn pred(g: &mut Graph, targets: Var, preds: Var, weighting: DecayWeighting) -> Result<Var> {
        let shape = g.shape(preds).to_vec();
        if shape.len() != 3 || g.shape(targets) != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "loss_pred",
                lhs: g.shape(targets).to_vec(),
                rhs: shape,
            });
        }
        let diff = g.sub(targets, preds)?;
        let sq = g.square(diff)?;
        let ss = g.sum(sq, Some(2))?;
        let dist = g.sqrt(ss)?;
        let w = g.constant(Tensor::vector(&decay_weights(shape[1], weighting)));
        let weighted = g.mul(dist, w)?;
        let per_sample = g.sum(weighted, Some(1))?;
        g.mean(per_sample, None)
    }

    fn mean_log(g: &mut Graph, probs: Var, complement: bool) -> Result<Var> {
        let p = g.clamp(probs, ADV_EPS, 1.0 - ADV_EPS)?;
        let p = if complement {
            let neg = g.neg(p)?;
            g.add_scalar(neg, 1.0)?
        } else {
            p
        };
        let l = g.log(p)?;
        g.mean(l, None)
    }

    /// `-(E[log D(x)] + E[log(1 - D(x_hat))])`.
    pub fn adv_discriminator(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
        let a = mean_log(g, real, false)?;
        let b = mean_log(g, fake, true)?;
        let s = g.add(a, b)?;
        g.neg(s)
    }

    /// Non-saturating generator loss `-E[log D(x_hat)]`.
    pub fn adv_generator(g: &mut Graph, fake: Var) -> Result<Var> {
        let a = mean_log(g, fake, false)?;
        g.neg(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Graph;
    use proptest::prelude::*;

    const SMAP: LossWeights = LossWeights {
        lambda: 1.0,
        gamma1: 2.0,
        gamma2: 0.1,
    };

    #[test]
    fn rec_examples() {
        let z = Tensor::vector(&[0.0, 0.0]);
        assert_eq!(loss_rec(&z, &z).unwrap(), 0.0);
        assert_eq!(loss_rec(&Tensor::vector(&[1.0, 0.0]), &z).unwrap(), 1.0);
        assert!((loss_rec(&Tensor::vector(&[3.0, 4.0]), &z).unwrap() - 5.0).abs() < 1e-12);
        // batch mean of 1 and 5
        let x = Tensor::matrix(&[[1.0, 0.0], [3.0, 4.0]]);
        assert!((loss_rec(&x, &Tensor::zeros(&[2, 2])).unwrap() - 3.0).abs() < 1e-12);
        assert!(loss_rec(&x, &z).is_err());
    }

    #[test]
    fn adv_examples() {
        let l = loss_adv(&[0.5], &[0.5]);
        assert!((l.d_loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l.d_loss - 1.3863).abs() < 1e-4);
        let l = loss_adv(&[0.9], &[0.1]);
        assert!((l.d_loss + 2.0 * 0.9f64.ln()).abs() < 1e-12);
        assert!((l.d_loss - 0.2107).abs() < 1e-4);
        let l = loss_adv(&[0.5], &[1.0 - 1e-12]);
        assert!(l.g_loss < 1e-6);
        // out-of-range probabilities are clamped, never infinite
        let l = loss_adv(&[0.0], &[1.0]);
        assert!(l.d_loss.is_finite() && l.g_loss.is_finite());
    }

    #[test]
    fn pred_examples() {
        let t = Tensor::matrix(&[[0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(loss_pred(&t, &t, DecayWeighting::Literal).unwrap(), 0.0);
        // T = 1: weight T - 1 = 0
        let t1 = Tensor::matrix(&[[0.0, 0.0]]);
        let p1 = Tensor::matrix(&[[3.0, 4.0]]);
        assert_eq!(loss_pred(&t1, &p1, DecayWeighting::Literal).unwrap(), 0.0);
        // T = 2, d1 = 1, d2 = 5 -> (1 * 1 + 0 * 5) / 4
        let p = Tensor::matrix(&[[1.0, 0.0], [3.0, 4.0]]);
        assert!((loss_pred(&t, &p, DecayWeighting::Literal).unwrap() - 0.25).abs() < 1e-12);
        assert!((loss_pred_back(&t, &p, DecayWeighting::Literal).unwrap() - 0.25).abs() < 1e-12);
        // shifted: (2 * 1 + 1 * 5) / 4
        assert!((loss_pred(&t, &p, DecayWeighting::Shifted).unwrap() - 1.75).abs() < 1e-12);
    }

    #[test]
    fn full_and_score_examples() {
        assert_eq!(loss_full(0.0, 0.0, 0.0, 0.0, &SMAP), 0.0);
        assert!((loss_full(0.0, 0.5, 0.2, 1.0, &SMAP) - 1.0).abs() < 1e-12);
        assert!((anomaly_score(0.5, 0.2, 1.0, &SMAP) - 1.0).abs() < 1e-12);
        assert_eq!(anomaly_score(0.0, 0.0, 0.0, &SMAP), 0.0);
        let doubled = LossWeights { lambda: 2.0, ..SMAP };
        let delta = loss_full(0.3, 0.5, 0.2, 1.0, &doubled) - loss_full(0.3, 0.5, 0.2, 1.0, &SMAP);
        assert!((delta - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weights_are_validated() {
        assert!(SMAP.validate().is_ok());
        assert!(LossWeights { gamma2: -0.1, ..SMAP }.validate().is_err());
        assert!(LossWeights { lambda: f64::NAN, ..SMAP }.validate().is_err());
    }

    #[test]
    fn graph_losses_agree_with_plain_ones() {
        let x = Tensor::new(&[2, 3, 2], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let y = Tensor::new(&[2, 3, 2], (0..12).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let r = on_graph::rec(&mut g, xv, yv).unwrap();
        assert!((g.data(r)[0] - loss_rec(&x, &y).unwrap()).abs() < 1e-12);
        for w in [DecayWeighting::Literal, DecayWeighting::Shifted] {
            let p = on_graph::pred(&mut g, xv, yv, w).unwrap();
            assert!((g.data(p)[0] - loss_pred(&x, &y, w).unwrap()).abs() < 1e-12);
        }
        let real = g.constant(Tensor::vector(&[0.9, 0.7]));
        let fake = g.constant(Tensor::vector(&[0.1, 0.4]));
        let d = on_graph::adv_discriminator(&mut g, real, fake).unwrap();
        let gl = on_graph::adv_generator(&mut g, fake).unwrap();
        let plain = loss_adv(&[0.9, 0.7], &[0.1, 0.4]);
        assert!((g.data(d)[0] - plain.d_loss).abs() < 1e-12);
        assert!((g.data(gl)[0] - plain.g_loss).abs() < 1e-12);
    }

    fn vec_pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(-5.0f64..5.0, n),
            proptest::collection::vec(-5.0f64..5.0, n),
            proptest::collection::vec(-5.0f64..5.0, n),
        )
    }

    proptest! {
        #[test]
        fn rec_is_a_metric((a, b, c) in vec_pair(6)) {
            let (a, b, c) = (Tensor::vector(&a), Tensor::vector(&b), Tensor::vector(&c));
            let ab = loss_rec(&a, &b).unwrap();
            prop_assert_eq!(loss_rec(&a, &a).unwrap(), 0.0);
            prop_assert!((ab - loss_rec(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(ab <= loss_rec(&a, &c).unwrap() + loss_rec(&c, &b).unwrap() + 1e-9);
            if a != b { prop_assert!(ab > 0.0); }
        }

        #[test]
        fn last_step_error_is_ignored(
            (t, p, _) in vec_pair(8),
            noise in proptest::collection::vec(-10.0f64..10.0, 2),
        ) {
            let targets = Tensor::new(&[4, 2], t).unwrap();
            let preds = Tensor::new(&[4, 2], p.clone()).unwrap();
            let mut moved = p;
            moved[6] += noise[0];
            moved[7] += noise[1];
            let moved = Tensor::new(&[4, 2], moved).unwrap();
            prop_assert_eq!(
                loss_pred(&targets, &preds, DecayWeighting::Literal).unwrap(),
                loss_pred(&targets, &moved, DecayWeighting::Literal).unwrap()
            );
        }

        #[test]
        fn full_is_linear_in_each_weight(
            parts in proptest::collection::vec(0.0f64..3.0, 4),
            base in proptest::collection::vec(0.0f64..3.0, 3),
            delta in 0.0f64..3.0,
        ) {
            let w = LossWeights { lambda: base[0], gamma1: base[1], gamma2: base[2] };
            let f = |w: &LossWeights| loss_full(parts[0], parts[1], parts[2], parts[3], w);
            let d_l = f(&LossWeights { lambda: w.lambda + delta, ..w }) - f(&w);
            let d_g1 = f(&LossWeights { gamma1: w.gamma1 + delta, ..w }) - f(&w);
            let d_g2 = f(&LossWeights { gamma2: w.gamma2 + delta, ..w }) - f(&w);
            prop_assert!((d_l - delta * parts[1]).abs() < 1e-9);
            prop_assert!((d_g1 - delta * parts[2]).abs() < 1e-9);
            prop_assert!((d_g2 - delta * parts[3]).abs() < 1e-9);
        }

        #[test]
        fn score_is_monotone_and_scale_invariant(
            comps in proptest::collection::vec((0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0), 2..30),
            scale in 0.1f64..10.0,
            bump in 0.001f64..1.0,
        ) {
            let w = SMAP;
            let scaled = LossWeights { lambda: w.lambda * scale, gamma1: w.gamma1 * scale, gamma2: w.gamma2 * scale };
            let s: Vec<f64> = comps.iter().map(|&(r, f, b)| anomaly_score(r, f, b, &w)).collect();
            let s2: Vec<f64> = comps.iter().map(|&(r, f, b)| anomaly_score(r, f, b, &scaled)).collect();
            for i in 0..s.len() {
                for j in 0..s.len() {
                    // order preserved up to rounding ties
                    if s[i] < s[j] - 1e-9 { prop_assert!(s2[i] < s2[j]); }
                }
            }
            let (r, f, b) = comps[0];
            prop_assert!(anomaly_score(r + bump, f, b, &w) > anomaly_score(r, f, b, &w));
            prop_assert!(anomaly_score(r, f, b, &w) >= 0.0);
        }
    }
}
