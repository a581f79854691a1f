//! MemAAE network: convolutional encoder, slot memory with softmax
//! addressing, transposed-convolution decoder, discriminator, and the
//! forward and backward LSTM predictors.
//!
//! Windows enter as `[B, W, K]`. The encoder emits one latent vector per
//! downsampled position, so latents are `[B, L, D]` with `L = W / 2^layers`;
//! memory addressing runs independently at every position.

mod layers;
mod params;

use thiserror::Error;

use crate::numcore::{Graph, Initializer, Tensor, TensorError, Var};

use layers::{Conv, ConvTranspose, Linear, Lstm};
pub use layers::{KERNEL, PADDING, STRIDE};
pub use params::{Bound, ParamGroup, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_vars: usize,
    pub window_size: usize,
    pub latent_size: usize,
    pub memory_size: usize,
    pub pred_step: usize,
    pub conv_channels: Vec<usize>,
    pub hidden_size: usize,
    pub use_memory: bool,
    pub use_prediction: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_vars: 1,
            window_size: 32,
            latent_size: 16,
            memory_size: 512,
            pred_step: 7,
            conv_channels: vec![32, 64],
            hidden_size: 64,
            use_memory: true,
            use_prediction: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_vars", self.n_vars),
            ("window_size", self.window_size),
            ("latent_size", self.latent_size),
            ("memory_size", self.memory_size),
            ("pred_step", self.pred_step),
            ("hidden_size", self.hidden_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(ModelError::Config("conv_channels must be non-empty and positive".into()));
        }
        let factor = STRIDE.pow(self.conv_channels.len() as u32);
        if self.window_size % factor != 0 {
            return Err(ModelError::Config(format!(
                "window_size {} must be divisible by {factor} for {} conv layers",
                self.window_size,
                self.conv_channels.len()
            )));
        }
        Ok(())
    }

    /// Number of latent positions per window.
    pub fn latent_len(&self) -> usize {
        self.window_size / STRIDE.pow(self.conv_channels.len() as u32)
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    convs: Vec<Conv>,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct MemoryBank {
    psi: Linear,
    slots: ParamId,
}

#[derive(Debug, Clone)]
struct Decoder {
    proj: Linear,
    convs: Vec<ConvTranspose>,
}

#[derive(Debug, Clone)]
struct Discriminator {
    convs: Vec<Conv>,
    out: Linear,
}

/// LSTM followed by two dense layers on its final output.
#[derive(Debug, Clone)]
struct Predictor {
    lstm: Lstm,
    fc1: Linear,
    fc2: Linear,
}

/// Result of memory addressing.
#[derive(Debug, Clone, Copy)]
pub struct MemoryRead {
    /// `[B, L, D]`
    pub z_hat: Var,
    /// `[B * L, M]` softmax weights, absent when memory is disabled.
    pub weights: Option<Var>,
}

/// Graph handles for one full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub z: Var,
    pub memory: MemoryRead,
    pub x_hat: Var,
    pub pred_forward: Option<Var>,
    pub pred_backward: Option<Var>,
}

/// Plain tensors from [`MemAae::infer`].
#[derive(Debug, Clone)]
pub struct Inference {
    pub z: Tensor,
    pub z_hat: Tensor,
    pub weights: Option<Tensor>,
    pub x_hat: Tensor,
    pub pred_forward: Option<Tensor>,
    pub pred_backward: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct MemAae {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    memory: Option<MemoryBank>,
    decoder: Decoder,
    discriminator: Discriminator,
    forward_predictor: Option<Predictor>,
    backward_predictor: Option<Predictor>,
}

impl MemAae {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::default();
        let gen = ParamGroup::Generator;
        let k = config.n_vars;
        let d = config.latent_size;
        let top = *config.conv_channels.last().expect("validated");

        let conv_stack = |store: &mut ParamStore, init: &mut Initializer, prefix: &str, group| {
            let mut c_in = k;
            config
                .conv_channels
                .iter()
                .enumerate()
                .map(|(i, &c_out)| {
                    let conv = Conv::new(store, init, &format!("{prefix}.conv{i}"), c_in, c_out, group);
                    c_in = c_out;
                    conv
                })
                .collect::<Vec<_>>()
        };

        let encoder = Encoder {
            convs: conv_stack(&mut store, &mut init, "encoder", gen),
            proj: Linear::new(&mut store, &mut init, "encoder.proj", top, d, gen),
        };

        let memory = config.use_memory.then(|| {
            let psi = Linear::new(&mut store, &mut init, "memory.psi", d, config.memory_size, gen);
            let bound = 1.0 / (d as f64).sqrt();
            let slots = store.add("memory.slots", init.uniform(&[config.memory_size, d], bound), gen);
            MemoryBank { psi, slots }
        });

        let decoder = {
            let proj = Linear::new(&mut store, &mut init, "decoder.proj", d, top, gen);
            let mut channels: Vec<usize> = config.conv_channels.iter().rev().copied().collect();
            channels.push(k);
            let convs = channels
                .windows(2)
                .enumerate()
                .map(|(i, pair)| ConvTranspose::new(&mut store, &mut init, &format!("decoder.deconv{i}"), pair[0], pair[1], gen))
                .collect();
            Decoder { proj, convs }
        };

        let discriminator = Discriminator {
            convs: conv_stack(&mut store, &mut init, "discriminator", ParamGroup::Discriminator),
            out: Linear::new(
                &mut store,
                &mut init,
                "discriminator.out",
                top * config.latent_len(),
                1,
                ParamGroup::Discriminator,
            ),
        };

        let mut predictor = |store: &mut ParamStore, prefix: &str| Predictor {
            lstm: Lstm::new(store, &mut init, &format!("{prefix}.lstm"), d, config.hidden_size, gen),
            fc1: Linear::new(store, &mut init, &format!("{prefix}.fc1"), config.hidden_size, config.hidden_size, gen),
            fc2: Linear::new(
                store,
                &mut init,
                &format!("{prefix}.fc2"),
                config.hidden_size,
                config.pred_step * k,
                gen,
            ),
        };
        let (forward_predictor, backward_predictor) = if config.use_prediction {
            let f = predictor(&mut store, "predictor_forward");
            let b = predictor(&mut store, "predictor_backward");
            (Some(f), Some(b))
        } else {
            (None, None)
        };

        Ok(Self {
            config,
            params: store,
            encoder,
            memory,
            decoder,
            discriminator,
            forward_predictor,
            backward_predictor,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.params.ids().find(|&id| self.params.name(id) == name)?;
        Some(self.params.get_mut(id))
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor> {
        let id = self.params.ids().find(|&id| self.params.name(id) == name)?;
        Some(self.params.get(id))
    }

    /// `[B, W, K]` windows to `[B, L, D]` latents.
    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let batch = g.shape(x)[0];
        let mut h = g.transpose(x, 1, 2)?;
        for conv in &self.encoder.convs {
            h = conv.forward(g, p, h)?;
            h = g.relu(h)?;
        }
        // [B, C, L] -> [B * L, C]
        let h = g.transpose(h, 1, 2)?;
        let len = self.config.latent_len();
        let h = g.reshape(h, &[batch * len, *self.config.conv_channels.last().expect("validated")])?;
        let z = self.encoder.proj.forward(g, p, h)?;
        Ok(g.reshape(z, &[batch, len, self.config.latent_size])?)
    }

    /// `w = softmax(psi(z))`, `z_hat = w M` at every latent position. With
    /// memory disabled the query is returned unchanged.
    pub fn memory_read(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<MemoryRead> {
        let Some(mem) = &self.memory else {
            return Ok(MemoryRead { z_hat: z, weights: None });
        };
        let shape = g.shape(z).to_vec();
        let flat = g.reshape(z, &[shape[0] * shape[1], shape[2]])?;
        let logits = mem.psi.forward(g, p, flat)?;
        let weights = g.softmax(logits, 1)?;
        let z_hat = g.matmul(weights, p.var(mem.slots))?;
        let z_hat = g.reshape(z_hat, &shape)?;
        Ok(MemoryRead {
            z_hat,
            weights: Some(weights),
        })
    }

    /// `[B, L, D]` latents back to `[B, W, K]`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, z_hat: Var) -> Result<Var> {
        let shape = g.shape(z_hat).to_vec();
        let (batch, len) = (shape[0], shape[1]);
        let top = *self.config.conv_channels.last().expect("validated");
        let flat = g.reshape(z_hat, &[batch * len, shape[2]])?;
        let h = self.decoder.proj.forward(g, p, flat)?;
        let h = g.relu(h)?;
        let h = g.reshape(h, &[batch, len, top])?;
        let mut h = g.transpose(h, 1, 2)?;
        let n = self.decoder.convs.len();
        for (i, conv) in self.decoder.convs.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            if i + 1 < n {
                h = g.relu(h)?;
            }
        }
        Ok(g.transpose(h, 1, 2)?)
    }

    /// Probability that each `[B, W, K]` window is real data, shape `[B]`.
    pub fn discriminate(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let batch = g.shape(x)[0];
        let mut h = g.transpose(x, 1, 2)?;
        for conv in &self.discriminator.convs {
            h = conv.forward(g, p, h)?;
            h = g.relu(h)?;
        }
        let width: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[batch, width])?;
        let logit = self.discriminator.out.forward(g, p, h)?;
        let prob = g.sigmoid(logit)?;
        Ok(g.reshape(prob, &[batch])?)
    }

    fn predict(&self, g: &mut Graph, p: &Bound, z_hat: Var, predictor: &Predictor, reverse: bool) -> Result<Var> {
        let batch = g.shape(z_hat)[0];
        let h = predictor.lstm.run(g, p, z_hat, reverse)?;
        let h = predictor.fc1.forward(g, p, h)?;
        let h = g.relu(h)?;
        let out = predictor.fc2.forward(g, p, h)?;
        Ok(g.reshape(out, &[batch, self.config.pred_step, self.config.n_vars])?)
    }

    /// `[B, T, K]` forecasts of the `T` observations after each window,
    /// nearest first. `None` when prediction is disabled.
    pub fn predict_forward(&self, g: &mut Graph, p: &Bound, z_hat: Var) -> Result<Option<Var>> {
        match &self.forward_predictor {
            Some(pred) => self.predict(g, p, z_hat, pred, false).map(Some),
            None => Ok(None),
        }
    }

    /// `[B, T, K]` backcasts of the `T` observations before each window,
    /// nearest first, reading the latent sequence in reverse.
    pub fn predict_backward(&self, g: &mut Graph, p: &Bound, z_hat: Var) -> Result<Option<Var>> {
        match &self.backward_predictor {
            Some(pred) => self.predict(g, p, z_hat, pred, true).map(Some),
            None => Ok(None),
        }
    }

    /// Encoder, memory, decoder and (optionally) both predictors.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, with_predictors: bool) -> Result<Forward> {
        let z = self.encode(g, p, x)?;
        let memory = self.memory_read(g, p, z)?;
        let x_hat = self.decode(g, p, memory.z_hat)?;
        let (pred_forward, pred_backward) = if with_predictors {
            (
                self.predict_forward(g, p, memory.z_hat)?,
                self.predict_backward(g, p, memory.z_hat)?,
            )
        } else {
            (None, None)
        };
        Ok(Forward {
            z,
            memory,
            x_hat,
            pred_forward,
            pred_backward,
        })
    }

    /// Untracked forward pass on `[B, W, K]` windows.
    pub fn infer(&self, windows: &Tensor) -> Result<Inference> {
        let shape = windows.shape();
        if shape.len() != 3 || shape[1] != self.config.window_size || shape[2] != self.config.n_vars {
            return Err(ModelError::Config(format!(
                "expected windows of shape [B, {}, {}], got {shape:?}",
                self.config.window_size, self.config.n_vars
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, None);
        let x = g.constant(windows.clone());
        let out = self.forward(&mut g, &p, x, true)?;
        let take = |v: Var| g.value(v).clone();
        Ok(Inference {
            z: take(out.z),
            z_hat: take(out.memory.z_hat),
            weights: out.memory.weights.map(take),
            x_hat: take(out.x_hat),
            pred_forward: out.pred_forward.map(take),
            pred_backward: out.pred_backward.map(take),
        })
    }

    /// Untracked discriminator output on `[B, W, K]` windows.
    pub fn discriminate_windows(&self, windows: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, None);
        let x = g.constant(windows.clone());
        let prob = self.discriminate(&mut g, &p, x)?;
        Ok(g.data(prob).to_vec())
    }
}
