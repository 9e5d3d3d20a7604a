//! Parameter bookkeeping and the small layer zoo shared by the restoration
//! and diffusion networks.
//!
//! Parameters live in a [`ParamStore`] owned by each network. A forward pass
//! records leaf nodes for the parameters it touches through a [`Binder`];
//! after `backward`, the binder writes the leaf gradients back into the
//! store, and [`ParamStore::adam_step_all`] applies the update. Keeping one
//! store per network makes freeze semantics trivial: a frozen network's
//! store simply never gets stepped.

use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, DetRng, Tape, Tensor, Var};

/// Handle to a parameter inside one [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub adam: AdamState,
}

/// Named, optimizer-tracked parameters of one network.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    lr: f32,
}

impl ParamStore {
    pub fn new(lr: f32) -> Self {
        ParamStore {
            params: Vec::new(),
            lr,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        value.requires_grad = true;
        let adam = AdamState::new(value.numel(), self.lr);
        self.params.push(Param { name, value, adam });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn learning_rate(&self) -> f32 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f32) {
        self.lr = lr;
        for p in &mut self.params {
            p.adam.lr = lr;
        }
    }

    /// Replace a parameter value by name (checkpoint restore).
    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Format(format!("unknown parameter name `{name}`")))?;
        if p.value.shape != value.shape {
            return Err(Error::Format(format!(
                "parameter `{name}` shape mismatch: stored {:?}, loaded {:?}",
                p.value.shape, value.shape
            )));
        }
        p.value.data = value.data;
        p.value.requires_grad = true;
        p.value.grad = None;
        Ok(())
    }

    /// Apply one Adam step to every parameter that accumulated a gradient;
    /// returns how many were updated.
    pub fn adam_step_all(&mut self) -> Result<usize> {
        let mut updated = 0;
        for p in &mut self.params {
            if p.value.grad.is_some() {
                adam_step(&mut p.value, &mut p.adam)?;
                updated += 1;
            }
        }
        Ok(updated)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// FNV-1a over every parameter byte, for freeze-contract checks.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for v in &p.value.data {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Maps parameters to tape leaves for one forward pass and routes gradients
/// back afterwards.
pub struct Binder {
    bound: Vec<Option<Var>>,
}

impl Binder {
    pub fn new(store: &ParamStore) -> Self {
        Binder {
            bound: vec![None; store.len()],
        }
    }

    /// Leaf var for `id`, creating it on first use.
    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = tape.input(&store.params[id.0].value);
        self.bound[id.0] = Some(v);
        v
    }

    /// Accumulate the tape's leaf gradients into the store's parameters.
    /// Call after `tape.backward`.
    pub fn harvest(&self, tape: &Tape, store: &mut ParamStore) {
        for (i, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                if let Some(g) = tape.grad(*v) {
                    store.params[i].value.accumulate_grad(g);
                }
            }
        }
    }
}

// ── layers ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    /// He-initialized conv with zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut DetRng,
    ) -> Self {
        let fan_in = (in_c * k * k) as f32;
        let std = (2.0 / fan_in).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn(&[out_c, in_c, k, k], std, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_c]));
        Conv2dLayer { w, b, stride, pad }
    }

    /// All-zero weights and bias; the building block of the conditioning
    /// branch's fusion layers.
    pub fn new_zeroed(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[out_c, in_c, k, k]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_c]));
        Conv2dLayer { w, b, stride, pad }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var> {
        let w = binder.var(tape, store, self.w);
        let b = binder.var(tape, store, self.b);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut DetRng,
    ) -> Self {
        let std = (1.0 / in_dim as f32).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(&[out_dim, in_dim], std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        LinearLayer { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, store: &ParamStore, x: Var) -> Var {
        let w = binder.var(tape, store, self.w);
        let b = binder.var(tape, store, self.b);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl LayerNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNormLayer {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, store: &ParamStore, x: Var) -> Var {
        let g = binder.var(tape, store, self.gamma);
        let b = binder.var(tape, store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f32,
}

impl GroupNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        GroupNormLayer {
            gamma,
            beta,
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, store: &ParamStore, x: Var) -> Var {
        let g = binder.var(tape, store, self.gamma);
        let b = binder.var(tape, store, self.beta);
        tape.group_norm(x, g, b, self.groups, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_routes_gradients_back() {
        let mut store = ParamStore::new(1e-2);
        let mut rng = DetRng::new(0, 0);
        let p = store.add("w", Tensor::randn(&[4], 1.0, &mut rng));

        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let v = binder.var(&mut tape, &store, p);
        let sq = tape.mul(v, v);
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        binder.harvest(&tape, &mut store);

        let expected: Vec<f32> = store.value(p).data.iter().map(|x| 2.0 * x).collect();
        assert_eq!(store.value(p).grad.as_deref(), Some(&expected[..]));
        assert_eq!(store.adam_step_all().unwrap(), 1);
        assert!(store.value(p).grad.is_none());
    }

    #[test]
    fn binder_reuses_one_leaf_per_param() {
        let mut store = ParamStore::new(1e-2);
        let p = store.add("w", Tensor::full(&[2], 3.0));
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let a = binder.var(&mut tape, &store, p);
        let b = binder.var(&mut tape, &store, p);
        assert_eq!(a, b);
    }

    #[test]
    fn content_hash_tracks_values() {
        let mut store = ParamStore::new(1e-2);
        store.add("w", Tensor::full(&[3], 1.0));
        let h1 = store.content_hash();
        let h2 = store.content_hash();
        assert_eq!(h1, h2);
        store.iter_mut().next().unwrap().value.data[0] = 2.0;
        assert_ne!(h1, store.content_hash());
    }
}
