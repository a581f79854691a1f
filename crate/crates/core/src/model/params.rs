use crate::numcore::{Graph, Tensor, Var};

/// Which optimizer owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Encoder, memory, projection, decoder, and both predictors.
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in declaration order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.groups.push(group);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Mutable references to the tensors of `ids`, in order.
    pub fn tensors_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor> {
        let wanted: Vec<bool> = {
            let mut w = vec![false; self.tensors.len()];
            ids.iter().for_each(|id| w[id.0] = true);
            w
        };
        let mut picked: Vec<(usize, &mut Tensor)> = self
            .tensors
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| wanted[*i])
            .collect();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let pos = picked.iter().position(|(i, _)| *i == id.0).expect("duplicate parameter id");
            out.push(picked.swap_remove(pos).1);
        }
        out
    }

    /// Copies every parameter into `g`; only `trainable` is tracked.
    pub fn bind(&self, g: &mut Graph, trainable: Option<ParamGroup>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .zip(&self.groups)
            .map(|(t, &grp)| g.param(t, Some(grp) == trainable))
            .collect();
        Bound { vars }
    }

    /// Moves gradients of `group` from the graph onto the stored tensors.
    /// Parameters the loss did not reach get a zero gradient.
    pub fn pull_grads(&mut self, g: &Graph, bound: &Bound, group: ParamGroup) {
        for i in 0..self.tensors.len() {
            if self.groups[i] != group {
                continue;
            }
            let grad = match g.grad(bound.vars[i]) {
                Some(gr) => gr.to_vec(),
                None => vec![0.0; self.tensors[i].numel()],
            };
            self.tensors[i].set_grad(grad).expect("graph keeps parameter shapes");
        }
    }
}

/// Graph handles for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
