//! Parameter storage and the layer building blocks.
//!
//! Parameters live in a [`ParamStore`] under dot-separated names
//! (`backbone.blocks.3.attn.wq`). Prefixes double as parameter groups: the
//! freeze policy, the optimizer selection, checkpoint filtering and the
//! budget arithmetic all work on name prefixes. A [`Ctx`] binds store entries
//! onto a tape for one forward pass, caching the leaf so a parameter used
//! twice accumulates a single gradient.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cell::RefCell;

use ndarray::ArrayD;

use crate::autograd::{Grads, Graph, Var};
use crate::fmath;
use crate::ops;
use crate::rng::SeedRng;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct ParamId(usize);

struct Entry {
    name: String,
    value: Rc<ArrayD<f32>>,
    grad: Option<ArrayD<f32>>,
    trainable: bool,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f32>, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value: Rc::new(value),
            grad: None,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Rc<ArrayD<f32>> {
        &self.entries[id.0].value
    }

    /// Mutable view for in-place updates. Clones only if a tape still holds
    /// the value, which does not happen in the train loop (graphs are dropped
    /// before the optimizer step).
    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    /// Replaces a value wholesale (checkpoint loading). Shapes must match.
    pub fn set_value(&mut self, id: ParamId, value: ArrayD<f32>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "set_value: shape mismatch for {}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = Rc::new(value);
    }

    pub fn grad(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: ArrayD<f32>) {
        let entry = &mut self.entries[id.0];
        debug_assert_eq!(entry.value.shape(), g.shape());
        match &mut entry.grad {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, t: bool) {
        self.entries[id.0].trainable = t;
    }

    /// Flips trainability for every parameter whose name starts with
    /// `prefix`; returns how many entries were touched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, t: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = t;
                n += 1;
            }
        }
        n
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.trainable(id)).collect()
    }

    /// Number of scalar elements across parameters under a name prefix.
    pub fn element_count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Number of scalar elements across trainable parameters under a prefix.
    pub fn trainable_element_count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// L2 norm of all gradients under a prefix; absent gradients count as 0.
    pub fn grad_norm_prefix(&self, prefix: &str) -> f64 {
        let mut acc = 0.0f64;
        for e in &self.entries {
            if !e.name.starts_with(prefix) {
                continue;
            }
            if let Some(g) = &e.grad {
                acc += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
        }
        fmath::sqrt(acc)
    }

    /// Largest absolute gradient entry under a prefix (0 when absent).
    pub fn max_abs_grad_prefix(&self, prefix: &str) -> f64 {
        let mut best = 0.0f64;
        for e in &self.entries {
            if !e.name.starts_with(prefix) {
                continue;
            }
            if let Some(g) = &e.grad {
                for &v in g.iter() {
                    best = best.max(fmath::abs(v as f64));
                }
            }
        }
        best
    }
}

/// Binds store parameters onto one tape, one leaf per parameter.
pub struct Ctx<'g> {
    pub g: &'g Graph,
    pub store: &'g ParamStore,
    binds: RefCell<BTreeMap<ParamId, Var>>,
}

impl<'g> Ctx<'g> {
    pub fn new(g: &'g Graph, store: &'g ParamStore) -> Self {
        Self {
            g,
            store,
            binds: RefCell::new(BTreeMap::new()),
        }
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn p(&self, id: ParamId) -> Var {
        if let Some(&v) = self.binds.borrow().get(&id) {
            return v;
        }
        let v = self
            .g
            .leaf(Rc::clone(self.store.value(id)), self.store.trainable(id));
        self.binds.borrow_mut().insert(id, v);
        v
    }

    /// Drains parameter gradients out of a backward result. Only trainable
    /// parameters were bound with `needs_grad`, so frozen ones never appear.
    pub fn take_param_grads(&self, grads: &mut Grads) -> Vec<(ParamId, ArrayD<f32>)> {
        let mut out = Vec::new();
        for (&pid, &var) in self.binds.borrow().iter() {
            if let Some(g) = grads.take(var) {
                out.push((pid, g));
            }
        }
        out
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f32),
    /// Gaussian with the given standard deviation (transformer linears).
    Normal(f32),
    /// He/Kaiming normal for convolutions followed by ReLU.
    HeNormal { fan_in: usize },
}

pub fn init_array(rng: &mut SeedRng, shape: &[usize], init: Init) -> ArrayD<f32> {
    match init {
        Init::Zeros => ArrayD::zeros(shape),
        Init::Ones => ArrayD::ones(shape),
        Init::Const(c) => ArrayD::from_elem(shape, c),
        Init::Normal(std) => ArrayD::from_shape_simple_fn(shape, || rng.normal() * std),
        Init::HeNormal { fan_in } => {
            let std = fmath::sqrtf(2.0 / fan_in as f32);
            ArrayD::from_shape_simple_fn(shape, || rng.normal() * std)
        }
    }
}

/// Registers parameters under a growing name prefix.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut SeedRng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut SeedRng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, seg: &str) -> ParamBuilder<'_> {
        let mut prefix = self.prefix.clone();
        prefix.push_str(seg);
        prefix.push('.');
        ParamBuilder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = alloc::format!("{}{}", self.prefix, name);
        let value = init_array(self.rng, shape, init);
        self.store.add(&full, value, true)
    }

    /// The full dotted prefix every added name is placed under.
    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

const LINEAR_INIT_STD: f32 = 0.02;

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, din: usize, dout: usize) -> Self {
        let mut pb = pb.scope(name);
        Self {
            w: pb.add("w", &[din, dout], Init::Normal(LINEAR_INIT_STD)),
            b: pb.add("b", &[dout], Init::Zeros),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        let y = ops::matmul(cx.g, x, cx.p(self.w), false, false);
        ops::add_row(cx.g, y, cx.p(self.b))
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize) -> Self {
        let mut pb = pb.scope(name);
        Self {
            gamma: pb.add("g", &[d], Init::Ones),
            beta: pb.add("b", &[d], Init::Zeros),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        ops::layer_norm(cx.g, x, cx.p(self.gamma), cx.p(self.beta), self.eps)
    }
}

/// Two-layer MLP with GELU, the transformer feed-forward block.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize, hidden: usize) -> Self {
        let mut pb = pb.scope(name);
        Self {
            fc1: Linear::new(&mut pb, "fc1", d, hidden),
            fc2: Linear::new(&mut pb, "fc2", hidden, d),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        let h = self.fc1.forward(cx, x);
        let h = ops::gelu(cx.g, h);
        self.fc2.forward(cx, h)
    }
}

/// Multi-head scaled dot-product attention. With `q_in == kv_in` this is
/// ordinary self-attention; the injector/extractor use it across token sets
/// of different widths.
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub inner: usize,
}

impl Attention {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        inner: usize,
        out_dim: usize,
        heads: usize,
    ) -> Self {
        assert!(
            heads > 0 && inner % heads == 0,
            "attention width {inner} not divisible by {heads} heads"
        );
        let mut pb = pb.scope(name);
        Self {
            wq: Linear::new(&mut pb, "q", q_dim, inner),
            wk: Linear::new(&mut pb, "k", kv_dim, inner),
            wv: Linear::new(&mut pb, "v", kv_dim, inner),
            wo: Linear::new(&mut pb, "o", inner, out_dim),
            heads,
            inner,
        }
    }

    pub fn forward(&self, cx: &Ctx, q_in: Var, kv_in: Var) -> Var {
        let g = cx.g;
        let q = self.wq.forward(cx, q_in);
        let k = self.wk.forward(cx, kv_in);
        let v = self.wv.forward(cx, kv_in);
        let dh = self.inner / self.heads;
        let scale = 1.0 / fmath::sqrtf(dh as f32);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ops::narrow(g, q, 1, h * dh, dh);
            let kh = ops::narrow(g, k, 1, h * dh, dh);
            let vh = ops::narrow(g, v, 1, h * dh, dh);
            let s = ops::scale(g, ops::matmul(g, qh, kh, false, true), scale);
            let a = ops::softmax_rows(g, s);
            heads.push(ops::matmul(g, a, vh, false, false));
        }
        let c = if heads.len() == 1 {
            heads[0]
        } else {
            ops::concat(g, 1, &heads)
        };
        self.wo.forward(cx, c)
    }
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let mut pb = pb.scope(name);
        Self {
            w: pb.add(
                "w",
                &[cout, cin, k, k],
                Init::HeNormal {
                    fan_in: cin * k * k,
                },
            ),
            b: pb.add("b", &[cout], Init::Zeros),
            stride,
            pad,
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        ops::conv2d(
            cx.g,
            x,
            cx.p(self.w),
            Some(cx.p(self.b)),
            self.stride,
            self.pad,
        )
    }
}

pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f32,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "group norm channels/groups mismatch");
        let mut pb = pb.scope(name);
        Self {
            gamma: pb.add("g", &[channels], Init::Ones),
            beta: pb.add("b", &[channels], Init::Zeros),
            groups,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        ops::group_norm(
            cx.g,
            x,
            self.groups,
            cx.p(self.gamma),
            cx.p(self.beta),
            self.eps,
        )
    }
}

/// Learned 2x upsampling: transposed conv with stride == kernel == 2.
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvTranspose2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let mut pb = pb.scope(name);
        Self {
            w: pb.add("w", &[cin, cout, k, k], Init::HeNormal { fan_in: cin }),
            b: pb.add("b", &[cout], Init::Zeros),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        ops::conv_transpose2d(cx.g, x, cx.p(self.w), Some(cx.p(self.b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (ParamStore, SeedRng) {
        (ParamStore::new(), SeedRng::new(7))
    }

    #[test]
    fn builder_scopes_compose_names() {
        let (mut store, mut rng) = fixture();
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let mut backbone = pb.scope("backbone");
        let mut block = backbone.scope("blocks.0");
        let lin = Linear::new(&mut block, "attn", 4, 4);
        assert_eq!(store.name(lin.w), "backbone.blocks.0.attn.w");
        assert!(store.id("backbone.blocks.0.attn.b").is_some());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_are_rejected() {
        let (mut store, _) = fixture();
        store.add("x", ArrayD::zeros(ndarray::IxDyn(&[1])), true);
        store.add("x", ArrayD::zeros(ndarray::IxDyn(&[1])), true);
    }

    #[test]
    fn ctx_binds_each_parameter_once() {
        let (mut store, mut rng) = fixture();
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let w = pb.add("w", &[2, 2], Init::Normal(0.02));
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let a = cx.p(w);
        let b = cx.p(w);
        assert_eq!(a, b);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn shared_parameter_accumulates_one_gradient() {
        let (mut store, mut rng) = fixture();
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let w = pb.add("w", &[3], Init::Ones);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let v = cx.p(w);
        // y = sum(w + w) -> dy/dw = 2
        let y = ops::sum_all(&g, ops::add(&g, v, v));
        let mut grads = g.backward(y);
        let pairs = cx.take_param_grads(&mut grads);
        assert_eq!(pairs.len(), 1);
        assert!(pairs[0].1.iter().all(|&x| x == 2.0));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let (mut store, mut rng) = fixture();
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let w = pb.add("enc.w", &[3], Init::Ones);
        let u = pb.add("dec.w", &[3], Init::Ones);
        store.set_trainable_prefix("enc.", false);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let s = ops::add(&g, cx.p(w), cx.p(u));
        let y = ops::sum_all(&g, s);
        let mut grads = g.backward(y);
        let pairs = cx.take_param_grads(&mut grads);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].0, u);
    }

    #[test]
    fn freeze_does_not_change_values() {
        let (mut store, mut rng) = fixture();
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let w = pb.add("enc.w", &[4, 4], Init::Normal(1.0));
        let before = store.value(w).clone();
        store.set_trainable_prefix("enc.", false);
        store.set_trainable_prefix("enc.", true);
        assert_eq!(**store.value(w), *before);
    }

    #[test]
    fn element_counts_follow_prefixes() {
        let (mut store, mut rng) = fixture();
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        pb.add("a.w", &[10], Init::Zeros);
        pb.add("a.v", &[5], Init::Zeros);
        pb.add("b.w", &[7], Init::Zeros);
        assert_eq!(store.element_count_prefix("a."), 15);
        assert_eq!(store.element_count_prefix("b."), 7);
        store.set_trainable_prefix("a.", false);
        assert_eq!(store.trainable_element_count_prefix("a."), 0);
        assert_eq!(store.trainable_element_count_prefix("b."), 7);
    }

    #[test]
    fn attention_composes_and_gradients_flow() {
        let (mut store, mut rng) = fixture();
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let attn = Attention::new(&mut pb, "attn", 8, 6, 8, 8, 2);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let q = g.constant(ArrayD::from_shape_simple_fn(
            ndarray::IxDyn(&[5, 8]),
            || cx.store.len() as f32 * 0.0 + 0.3,
        ));
        let mut rng2 = SeedRng::new(9);
        let kv = g.constant(ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[7, 6]), || {
            rng2.normal()
        }));
        let out = attn.forward(&cx, q, kv);
        assert_eq!(g.shape(out), vec![5, 8]);
        let y = ops::sum_all(&g, out);
        let mut grads = g.backward(y);
        let pairs = cx.take_param_grads(&mut grads);
        // all eight linears (q,k,v,o weights and biases) get gradients
        assert_eq!(pairs.len(), 8);
        let total: f64 = pairs
            .iter()
            .map(|(_, g)| g.iter().map(|&v| (v as f64).abs()).sum::<f64>())
            .sum();
        assert!(total > 0.0);
    }

    #[test]
    fn he_init_scales_with_fan_in() {
        let mut rng = SeedRng::new(11);
        let a = init_array(&mut rng, &[64, 64], Init::HeNormal { fan_in: 64 });
        let var = a.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / a.len() as f64;
        assert!((var - 2.0 / 64.0).abs() < 0.01, "var {var}");
    }
}
