use crate::numcore::{Graph, Initializer, Result, Tensor, Var};

use super::params::{Bound, ParamGroup, ParamId, ParamStore};

/// Kernel, stride, and padding of every (transposed) convolution. Each conv
/// halves the sequence length and each transposed conv doubles it.
pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;

/// `x W + b` on `[N, in]` rows.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        input: usize,
        output: usize,
        group: ParamGroup,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.fan_in(&[input, output], input), group);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]), group);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add(y, p.var(self.bias))
    }
}

/// Strided conv1d with a per-channel bias.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        group: ParamGroup,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.fan_in(&[c_out, c_in, KERNEL], c_in * KERNEL),
            group,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out, 1]), group);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv1d(x, p.var(self.weight), STRIDE, PADDING)?;
        g.add(y, p.var(self.bias))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvTranspose {
    weight: ParamId,
    bias: ParamId,
}

impl ConvTranspose {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        group: ParamGroup,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.fan_in(&[c_in, c_out, KERNEL], c_in * KERNEL / STRIDE),
            group,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out, 1]), group);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv_transpose1d(x, p.var(self.weight), STRIDE, PADDING)?;
        g.add(y, p.var(self.bias))
    }
}

/// LSTM cell unrolled over a `[B, L, D]` sequence. Gate order in the fused
/// weights is input, forget, cell, output.
#[derive(Debug, Clone)]
pub(crate) struct Lstm {
    input_weight: ParamId,
    hidden_weight: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        input: usize,
        hidden: usize,
        group: ParamGroup,
    ) -> Self {
        let input_weight = store.add(
            format!("{name}.input_weight"),
            init.fan_in(&[input, 4 * hidden], hidden),
            group,
        );
        let hidden_weight = store.add(
            format!("{name}.hidden_weight"),
            init.fan_in(&[hidden, 4 * hidden], hidden),
            group,
        );
        let mut bias = vec![0.0; 4 * hidden];
        // forget gate starts open
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::new(&[4 * hidden], bias).expect("sized"),
            group,
        );
        Self {
            input_weight,
            hidden_weight,
            bias,
            hidden,
        }
    }

    /// Final hidden state `[B, H]` after consuming the sequence, last to first
    /// when `reverse`.
    pub fn run(&self, g: &mut Graph, p: &Bound, seq: Var, reverse: bool) -> Result<Var> {
        let shape = g.shape(seq).to_vec();
        let (batch, len, dim) = (shape[0], shape[1], shape[2]);
        let h4 = 4 * self.hidden;
        let flat = g.reshape(seq, &[batch * len, dim])?;
        let projected = g.matmul(flat, p.var(self.input_weight))?;
        let projected = g.reshape(projected, &[batch, len, h4])?;

        let mut h = g.constant(Tensor::zeros(&[batch, self.hidden]));
        let mut c = g.constant(Tensor::zeros(&[batch, self.hidden]));
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for l in order {
            let x_l = g.slice(projected, 1, l, l + 1)?;
            let x_l = g.reshape(x_l, &[batch, h4])?;
            let rec = g.matmul(h, p.var(self.hidden_weight))?;
            let gates = g.add(x_l, rec)?;
            let gates = g.add(gates, p.var(self.bias))?;
            let hs = self.hidden;
            let i = g.slice(gates, 1, 0, hs)?;
            let i = g.sigmoid(i)?;
            let f = g.slice(gates, 1, hs, 2 * hs)?;
            let f = g.sigmoid(f)?;
            let cand = g.slice(gates, 1, 2 * hs, 3 * hs)?;
            let cand = g.tanh(cand)?;
            let o = g.slice(gates, 1, 3 * hs, 4 * hs)?;
            let o = g.sigmoid(o)?;
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let squashed = g.tanh(c)?;
            h = g.mul(o, squashed)?;
        }
        Ok(h)
    }
}
