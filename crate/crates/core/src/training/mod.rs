//! Alternating adversarial training, configuration, and checkpoints.
//!
//! Every batch takes one discriminator step on the adversarial loss and then
//! one generator step (encoder, memory, decoder, predictors) on the full
//! objective with the non-saturating adversarial term. Each step builds a
//! fresh graph in which only the updated group is tracked.

mod checkpoint;
mod config;

use std::ops::RangeInclusive;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{NormalizationStats, WindowedDataset};
use crate::model::{Bound, MemAae, ModelError, ParamGroup};
use crate::numcore::gradcheck::{rel_error, GradCheck};
use crate::numcore::{clip_grad_norm, AdamState, Graph, Tensor, TensorError, Var};
use crate::objective::{on_graph, LossReport};

pub use checkpoint::{load_checkpoint, load_checkpoint_as, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use config::{ScoreHorizon, TrainConfig, BENCHMARK_CONFIG};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(
        "no eligible training window: series of {len} points cannot hold a window of {window} with {steps} prediction steps on both sides"
    )]
    NoEligibleWindow { len: usize, window: usize, steps: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// A model with the configuration that built it and the normalization
/// statistics of its training split.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: TrainConfig,
    pub stats: NormalizationStats,
    pub model: MemAae,
}

impl ModelBundle {
    /// Freshly initialized model for `stats.min.len()` variables.
    pub fn new(config: TrainConfig, stats: NormalizationStats) -> Result<Self> {
        config.validate()?;
        let model = MemAae::new(config.model_config(stats.min.len()), config.seed)?;
        Ok(Self { config, stats, model })
    }

    pub fn n_vars(&self) -> usize {
        self.stats.min.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Batch means over the epoch.
    pub losses: LossReport,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
}

/// Windows with their forward and backward targets, all nearest step first.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Timestamp of each window's last row.
    pub ends: Vec<usize>,
    /// `[B, W, K]`
    pub windows: Tensor,
    /// `[B, T, K]`: `x[t+1], ..., x[t+T]`
    pub forward: Tensor,
    /// `[B, T, K]`: `x[t-W], ..., x[t-W-T+1]`
    pub backward: Tensor,
}

/// End timestamps `t` whose window has `T` successors and `T` predecessors
/// inside a series of `len` points.
pub fn eligible_ends(len: usize, window: usize, steps: usize) -> Result<RangeInclusive<usize>> {
    let lo = window - 1 + steps;
    match (len.checked_sub(1 + steps), steps) {
        (Some(hi), 1..) if hi >= lo && window >= 1 => Ok(lo..=hi),
        _ => Err(TrainError::NoEligibleWindow { len, window, steps }),
    }
}

/// Uniform sample (with replacement) of `batch_size` eligible windows.
pub fn sample_batch(dataset: &WindowedDataset, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let (w, steps) = (config.window_size, config.pred_step);
    let series = dataset.series();
    let range = eligible_ends(series.len(), w, steps)?;
    let ends: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(range.clone())).collect();
    Ok(assemble(dataset, w, steps, ends))
}

/// Batch for explicit window end timestamps, which must be eligible.
pub fn assemble(dataset: &WindowedDataset, w: usize, steps: usize, ends: Vec<usize>) -> Batch {
    let series = dataset.series();
    let k = series.n_vars();
    let b = ends.len();
    let mut windows = Vec::with_capacity(b * w * k);
    let mut forward = Vec::with_capacity(b * steps * k);
    let mut backward = Vec::with_capacity(b * steps * k);
    for &t in &ends {
        windows.extend_from_slice(series.rows(t + 1 - w, t + 1));
        forward.extend_from_slice(series.rows(t + 1, t + 1 + steps));
        for i in 1..=steps {
            backward.extend_from_slice(series.row(t + 1 - w - i));
        }
    }
    Batch {
        ends,
        windows: Tensor::new(&[b, w, k], windows).expect("sized"),
        forward: Tensor::new(&[b, steps, k], forward).expect("sized"),
        backward: Tensor::new(&[b, steps, k], backward).expect("sized"),
    }
}

/// Stateful trainer: owns the bundle, both optimizers, and the batch stream.
pub struct Trainer {
    bundle: ModelBundle,
    gen_opt: AdamState,
    disc_opt: AdamState,
    rng: ChaCha8Rng,
}

/// Stream of the batch sampler; the initializer uses the default stream.
const BATCH_STREAM: u64 = 1;

impl Trainer {
    pub fn new(bundle: ModelBundle) -> Self {
        let store = bundle.model.params();
        let gen_ids = store.ids_in(ParamGroup::Generator);
        let disc_ids = store.ids_in(ParamGroup::Discriminator);
        let lr = bundle.config.learning_rate;
        let gen_opt = AdamState::new(lr, gen_ids.iter().map(|&id| store.get(id)));
        let disc_opt = AdamState::new(lr, disc_ids.iter().map(|&id| store.get(id)));
        let mut rng = ChaCha8Rng::seed_from_u64(bundle.config.seed);
        rng.set_stream(BATCH_STREAM);
        Self {
            bundle,
            gen_opt,
            disc_opt,
            rng,
        }
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> ModelBundle {
        self.bundle
    }

    pub fn next_batch(&mut self, dataset: &WindowedDataset) -> Result<Batch> {
        sample_batch(dataset, &self.bundle.config, &mut self.rng)
    }

    /// Discriminator update on `-L_adv`. Returns its loss.
    pub fn discriminator_step(&mut self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bundle.model.params().bind(&mut g, Some(ParamGroup::Discriminator));
        let loss = discriminator_loss(&mut g, &p, &self.bundle.model, batch)?;
        let value = g.data(loss)[0];
        if !value.is_finite() {
            return Ok(value);
        }
        g.backward(loss)?;
        self.apply(&g, &p, ParamGroup::Discriminator)?;
        Ok(value)
    }

    /// Generator update on the full objective. Returns the batch report with
    /// `adv_d` left at zero.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let mut g = Graph::new();
        let p = self.bundle.model.params().bind(&mut g, Some(ParamGroup::Generator));
        let (total, report) = generator_loss(&mut g, &p, &self.bundle.model, batch, &self.bundle.config)?;
        if !report.is_finite() {
            return Ok(report);
        }
        g.backward(total)?;
        self.apply(&g, &p, ParamGroup::Generator)?;
        Ok(report)
    }

    fn apply(&mut self, g: &Graph, p: &Bound, group: ParamGroup) -> Result<()> {
        let clip = self.bundle.config.grad_clip;
        let store = self.bundle.model.params_mut();
        store.pull_grads(g, p, group);
        let ids = store.ids_in(group);
        let mut tensors = store.tensors_mut(&ids);
        if clip > 0.0 {
            clip_grad_norm(&mut tensors, clip);
        }
        let opt = match group {
            ParamGroup::Generator => &mut self.gen_opt,
            ParamGroup::Discriminator => &mut self.disc_opt,
        };
        opt.step(&mut tensors)?;
        Ok(())
    }

    /// One epoch of `batches_per_epoch` batches. `epoch` is 1-based and only
    /// used for error reporting.
    pub fn epoch(&mut self, dataset: &WindowedDataset, epoch: usize) -> Result<EpochLog> {
        let start = Instant::now();
        let mut reports = Vec::with_capacity(self.bundle.config.batches_per_epoch);
        for batch_index in 0..self.bundle.config.batches_per_epoch {
            let batch = self.next_batch(dataset)?;
            let fail = |detail: String| TrainError::NonFinite {
                epoch,
                batch: batch_index,
                detail,
            };
            // NaN inputs surface as a domain error of sqrt or log
            let located = |e: TrainError| match e {
                TrainError::Tensor(e @ TensorError::Domain { .. }) => fail(e.to_string()),
                other => other,
            };
            let adv_d = self.discriminator_step(&batch).map_err(located)?;
            if !adv_d.is_finite() {
                return Err(fail(format!("discriminator loss {adv_d}")));
            }
            let report = LossReport {
                adv_d,
                ..self.generator_step(&batch).map_err(located)?
            };
            if !report.is_finite() {
                return Err(fail(format!("{report:?}")));
            }
            reports.push(report);
        }
        Ok(EpochLog {
            epoch,
            losses: LossReport::mean(&reports),
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// `-(E[log D(x)] + E[log(1 - D(x_hat))])` on a batch.
pub fn discriminator_loss(g: &mut Graph, p: &Bound, model: &MemAae, batch: &Batch) -> Result<Var> {
    let x = g.constant(batch.windows.clone());
    let out = model.forward(g, p, x, false)?;
    let real = model.discriminate(g, p, x)?;
    let fake = model.discriminate(g, p, out.x_hat)?;
    Ok(on_graph::adv_discriminator(g, real, fake)?)
}

/// `-E[log D(x_hat)] + lambda L_rec + gamma1 L_pred + gamma2 L_pred_back` on
/// a batch, with the prediction terms dropped under `no_prediction`.
pub fn generator_loss(
    g: &mut Graph,
    p: &Bound,
    model: &MemAae,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(Var, LossReport)> {
    let weights = config.weights();
    let x = g.constant(batch.windows.clone());
    let out = model.forward(g, p, x, !config.no_prediction)?;
    let fake = model.discriminate(g, p, out.x_hat)?;
    let adv = on_graph::adv_generator(g, fake)?;
    let rec = on_graph::rec(g, x, out.x_hat)?;
    let scaled = g.mul_scalar(rec, weights.lambda)?;
    let mut total = g.add(adv, scaled)?;
    let mut report = LossReport {
        rec: g.data(rec)[0],
        adv_g: g.data(adv)[0],
        ..LossReport::default()
    };
    if let (Some(pf), Some(pb)) = (out.pred_forward, out.pred_backward) {
        let tf = g.constant(batch.forward.clone());
        let tb = g.constant(batch.backward.clone());
        let fwd = on_graph::pred(g, tf, pf, config.pred_weighting)?;
        let back = on_graph::pred(g, tb, pb, config.pred_weighting)?;
        report.pred_fwd = g.data(fwd)[0];
        report.pred_back = g.data(back)[0];
        let f = g.mul_scalar(fwd, weights.gamma1)?;
        let b = g.mul_scalar(back, weights.gamma2)?;
        total = g.add(total, f)?;
        total = g.add(total, b)?;
    }
    report.full = g.data(total)[0];
    Ok((total, report))
}

/// Finite-difference check of one group's objective: the generator loss for
/// [`ParamGroup::Generator`], the discriminator loss otherwise.
pub fn check_objective_gradients(
    model: &MemAae,
    batch: &Batch,
    config: &TrainConfig,
    group: ParamGroup,
    step: f64,
    floor: f64,
) -> Result<GradCheck> {
    let loss = |model: &MemAae, g: &mut Graph, p: &Bound| -> Result<Var> {
        match group {
            ParamGroup::Generator => Ok(generator_loss(g, p, model, batch, config)?.0),
            ParamGroup::Discriminator => discriminator_loss(g, p, model, batch),
        }
    };
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, Some(group));
    let out = loss(model, &mut g, &p)?;
    g.backward(out)?;
    let mut probe = model.clone();
    let value = |m: &MemAae| -> Result<f64> {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, None);
        let out = loss(m, &mut g, &p)?;
        Ok(g.data(out)[0])
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for id in model.params().ids_in(group) {
        let analytic = g.grad(p.var(id)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; model.params().get(id).numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let x = probe.params().get(id).data()[j];
            probe.params_mut().get_mut(id).data_mut()[j] = x + step;
            let up = value(&probe)?;
            probe.params_mut().get_mut(id).data_mut()[j] = x - step;
            let down = value(&probe)?;
            probe.params_mut().get_mut(id).data_mut()[j] = x;
            let err = rel_error(a, (up - down) / (2.0 * step), floor);
            if report.checked == 0 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (id.index(), j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Trains a fresh model on normalized windows.
pub fn train(dataset: &WindowedDataset, config: &TrainConfig, stats: &NormalizationStats) -> Result<(ModelBundle, TrainLog)> {
    train_with(dataset, config, stats, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    dataset: &WindowedDataset,
    config: &TrainConfig,
    stats: &NormalizationStats,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelBundle, TrainLog)> {
    config.validate()?;
    if dataset.window_len() != config.window_size {
        return Err(TrainError::Config(format!(
            "dataset windows have length {}, config expects {}",
            dataset.window_len(),
            config.window_size
        )));
    }
    if dataset.n_vars() != stats.min.len() {
        return Err(TrainError::Config(format!(
            "dataset has {} variables, normalization statistics have {}",
            dataset.n_vars(),
            stats.min.len()
        )));
    }
    let bundle = ModelBundle::new(config.clone(), stats.clone())?;
    let mut log = TrainLog {
        seed: config.seed,
        epochs: Vec::with_capacity(config.epochs),
    };
    if config.epochs == 0 {
        return Ok((bundle, log));
    }
    eligible_ends(dataset.series().len(), config.window_size, config.pred_step)?;
    let mut trainer = Trainer::new(bundle);
    for epoch in 1..=config.epochs {
        let entry = trainer.epoch(dataset, epoch)?;
        log::debug!("epoch {epoch}: {:?}", entry.losses);
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok((trainer.into_bundle(), log))
}

#[cfg(test)]
mod tests;
