use memaae::data::{fit_normalize, window, NormalizationStats, RawSeries};
use memaae::evaluation::{score_series, ScoreHorizon};
use memaae::model::{MemAae, ModelConfig, ParamGroup};
use memaae::numcore::{AdamState, Graph, Tensor};
use memaae::objective::on_graph;
use memaae::training::{train, TrainConfig};

fn tiny_model(use_prediction: bool) -> ModelConfig {
    ModelConfig {
        n_vars: 2,
        window_size: 8,
        latent_size: 4,
        memory_size: 6,
        pred_step: 2,
        conv_channels: vec![4, 6],
        hidden_size: 5,
        use_memory: true,
        use_prediction,
    }
}

/// Adam on one group of `model` for `steps` steps of `loss`.
fn fit(model: &mut MemAae, group: ParamGroup, lr: f64, steps: usize, loss: impl Fn(&MemAae, &mut Graph, &memaae::model::Bound) -> memaae::numcore::Var) {
    let ids = model.params().ids_in(group);
    let mut opt = AdamState::new(lr, ids.iter().map(|&id| model.params().get(id)));
    for _ in 0..steps {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, Some(group));
        let l = loss(model, &mut g, &p);
        g.backward(l).unwrap();
        model.params_mut().pull_grads(&g, &p, group);
        opt.step(&mut model.params_mut().tensors_mut(&ids)).unwrap();
    }
}

#[test]
fn autoencoder_overfits_a_constant_window() {
    let mut model = MemAae::new(tiny_model(false), 2).unwrap();
    let x = Tensor::full(&[1, 8, 2], 0.7);
    let xc = x.clone();
    fit(&mut model, ParamGroup::Generator, 1e-2, 600, move |m, g, p| {
        let xv = g.constant(xc.clone());
        let out = m.forward(g, p, xv, false).unwrap();
        on_graph::rec(g, xv, out.x_hat).unwrap()
    });
    let x_hat = model.infer(&x).unwrap().x_hat;
    let mse = x_hat.data().iter().map(|v| (v - 0.7).powi(2)).sum::<f64>() / 16.0;
    assert!(mse < 1e-3, "mse {mse}");
}

#[test]
fn discriminator_separates_toy_sets() {
    let mut model = MemAae::new(tiny_model(false), 3).unwrap();
    let real: Vec<f64> = (0..4 * 16).map(|i| ((i / 2) as f64 * 0.8).sin()).collect();
    let real = Tensor::new(&[4, 8, 2], real).unwrap();
    let fake = Tensor::full(&[4, 8, 2], 0.1);
    let (r, f) = (real.clone(), fake.clone());
    fit(&mut model, ParamGroup::Discriminator, 1e-2, 100, move |m, g, p| {
        let rv = g.constant(r.clone());
        let fv = g.constant(f.clone());
        let pr = m.discriminate(g, p, rv).unwrap();
        let pf = m.discriminate(g, p, fv).unwrap();
        on_graph::adv_discriminator(g, pr, pf).unwrap()
    });
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let pr = mean(model.discriminate_windows(&real).unwrap());
    let pf = mean(model.discriminate_windows(&fake).unwrap());
    assert!(pr > pf + 0.5, "real {pr}, fake {pf}");
}

#[test]
fn forecasts_beat_last_value_on_a_sinusoid() {
    let n = 400;
    let values: Vec<f64> = (0..n).map(|t| 0.5 + 0.4 * (t as f64 * 2.0 * std::f64::consts::PI / 12.0).sin()).collect();
    let series = RawSeries::new(values.clone(), 1, None).unwrap();
    let config = TrainConfig {
        window_size: 16,
        latent_size: 8,
        memory_size: 16,
        pred_step: 3,
        conv_channels: vec![8, 16],
        hidden_size: 16,
        batch_size: 16,
        batches_per_epoch: 20,
        epochs: 15,
        learning_rate: 3e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    let stats = fit_normalize(&series);
    let ds = window(&series, 16).unwrap();
    let (bundle, _) = train(&ds, &config, &stats).unwrap();
    let ends: Vec<usize> = (15..n - 3).collect();
    let mut data = Vec::new();
    for &t in &ends {
        data.extend_from_slice(&values[t - 15..=t]);
    }
    let out = bundle.model.infer(&Tensor::new(&[ends.len(), 16, 1], data).unwrap()).unwrap();
    let pred = out.pred_forward.unwrap();
    let (mut model_err, mut naive_err) = (0.0, 0.0);
    for (b, &t) in ends.iter().enumerate() {
        for i in 1..=3 {
            model_err += (pred.data()[b * 3 + i - 1] - values[t + i]).abs();
            naive_err += (values[t] - values[t + i]).abs();
        }
    }
    assert!(model_err < naive_err, "model {model_err}, naive {naive_err}");
}

#[test]
fn constant_series_scores_near_zero() {
    let series = RawSeries::new(vec![0.5; 2 * 80], 2, None).unwrap();
    let stats = NormalizationStats {
        min: vec![0.0; 2],
        max: vec![1.0; 2],
    };
    let config = TrainConfig {
        window_size: 8,
        latent_size: 4,
        memory_size: 6,
        pred_step: 2,
        conv_channels: vec![4, 6],
        hidden_size: 5,
        batch_size: 8,
        batches_per_epoch: 20,
        epochs: 20,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let ds = window(&series, 8).unwrap();
    let (bundle, _) = train(&ds, &config, &stats).unwrap();
    let scores = score_series(&bundle, &series, &config.weights(), ScoreHorizon::OneStep).unwrap();
    assert_eq!(scores.len(), 80 - 8 + 1);
    assert_eq!(scores.start, 7);
    let fresh = memaae::training::ModelBundle::new(config.clone(), stats).unwrap();
    let untrained = score_series(&fresh, &series, &config.weights(), ScoreHorizon::OneStep).unwrap();
    let max = scores.scores.iter().copied().fold(0.0, f64::max);
    let before = untrained.scores.iter().sum::<f64>() / untrained.len() as f64;
    assert!(max < 0.05, "max score {max}");
    assert!(max < 0.1 * before, "max {max}, untrained mean {before}");
}
