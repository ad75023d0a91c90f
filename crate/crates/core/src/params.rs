//! Parameter registry, storage, and the forward-pass graph context.
//!
//! Model components register their weights in a [`ParamLayout`] and keep the
//! returned [`ParamId`]s. The layout alone is enough to count parameters; a
//! [`ParamStore`] holds the actual values. A [`Graph`] binds store values onto a
//! [`Tape`] lazily during a forward pass.

use std::cell::RefCell;
use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    FanIn(usize),
    Uniform(f64),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            weight: self.add(format!("{name}.weight"), &[d_in, d_out], Init::FanIn(d_in)),
            bias: self.add(format!("{name}.bias"), &[d_out], Init::FanIn(d_in)),
        }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gain: self.add(format!("{name}.gain"), &[d], Init::Ones),
            bias: self.add(format!("{name}.bias"), &[d], Init::Zeros),
        }
    }

    pub fn conv3x3(&mut self, name: &str, c_in: usize, c_out: usize, stride: usize) -> Conv {
        let fan_in = c_in * 9;
        Conv {
            weight: self.add(format!("{name}.weight"), &[c_out, c_in, 3, 3], Init::FanIn(fan_in)),
            bias: self.add(format!("{name}.bias"), &[c_out], Init::FanIn(fan_in)),
            stride,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total scalar count, computed from shapes only.
    pub fn count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(ParamSpec::numel)
            .sum()
    }

    pub fn materialize<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let values = self
            .specs
            .iter()
            .map(|s| {
                let t = match s.init {
                    Init::FanIn(fan_in) => {
                        Tensor::uniform(&s.shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
                    }
                    Init::Uniform(scale) => Tensor::uniform(&s.shape, scale, rng),
                    Init::Ones => Tensor::ones(&s.shape),
                    Init::Zeros => Tensor::zeros(&s.shape),
                };
                Arc::new(t)
            })
            .collect();
        ParamStore {
            names: self.specs.iter().map(|s| s.name.clone()).collect(),
            values,
        }
    }
}

/// Parameter values, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn from_parts(names: Vec<String>, values: Vec<Tensor>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::Validation(format!(
                "{} parameter names for {} tensors",
                names.len(),
                values.len()
            )));
        }
        Ok(Self {
            names,
            values: values.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", current.shape(), value.shape()));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.values.iter().map(|v| v.as_ref())
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// True when names and shapes match `layout` one to one.
    pub fn matches(&self, layout: &ParamLayout) -> bool {
        self.len() == layout.len()
            && self
                .names
                .iter()
                .zip(&self.values)
                .zip(layout.specs())
                .all(|((n, v), s)| *n == s.name && v.shape() == s.shape.as_slice())
    }
}

// ---------------------------------------------------------------------------
// Graph

/// A tape plus lazily bound parameters and optional dropout randomness.
pub struct Graph<'s> {
    tape: Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    trainable: bool,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl<'s> Graph<'s> {
    /// Parameters enter as constants; dropout is off.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self::build(store, false, None)
    }

    /// Parameters receive gradients; dropout is off.
    pub fn trainable(store: &'s ParamStore) -> Self {
        Self::build(store, true, None)
    }

    /// Parameters receive gradients and dropout draws from `rng`.
    pub fn training(store: &'s ParamStore, rng: ChaCha8Rng) -> Self {
        Self::build(store, true, Some(RefCell::new(rng)))
    }

    fn build(store: &'s ParamStore, trainable: bool, rng: Option<RefCell<ChaCha8Rng>>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable,
            dropout_rng: rng,
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let value = self.store.shared(id);
        let v = if self.trainable {
            self.tape.variable(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&self, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_ref() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let shape = self.tape.shape(x);
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mut rng = rng.borrow_mut();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask)?);
        self.tape.mul(x, m)
    }

    /// Gradient of every bound parameter, indexed like the store.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .borrow()
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Small parameter bundles

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.linear(x, g.param(self.weight), g.param(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(self.gain), g.param(self.bias), LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv {
    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.conv2d(x, g.param(self.weight), g.param(self.bias), self.stride)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn layout_counts_without_allocating() {
        let mut layout = ParamLayout::new();
        layout.linear("a", 3, 4);
        layout.layer_norm("ln", 4);
        layout.conv3x3("c", 2, 5, 1);
        assert_eq!(layout.count(), (12 + 4) + 8 + (90 + 5));
        assert_eq!(layout.count_prefix("c."), 95);
    }

    #[test]
    fn materialize_respects_init() {
        let mut layout = ParamLayout::new();
        let lin = layout.linear("a", 16, 2);
        let ln = layout.layer_norm("ln", 2);
        let store = layout.materialize(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(store.get(lin.weight).data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(store.get(ln.gain).data(), &[1.0, 1.0]);
        assert_eq!(store.get(ln.bias).data(), &[0.0, 0.0]);
        assert!(store.matches(&layout));
    }

    #[test]
    fn inference_graph_records_no_gradients() {
        let mut layout = ParamLayout::new();
        let lin = layout.linear("a", 2, 2);
        let store = layout.materialize(&mut ChaCha8Rng::seed_from_u64(0));
        let g = Graph::inference(&store);
        let x = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let y = lin.forward(&g, x).unwrap();
        let s = g.sum(y).unwrap();
        let mut grads = g.backward(s).unwrap();
        assert!(g.param_grads(&mut grads).iter().all(Option::is_none));
    }

    #[test]
    fn dropout_is_identity_without_rng() {
        let layout = ParamLayout::new();
        let store = layout.materialize(&mut ChaCha8Rng::seed_from_u64(0));
        let g = Graph::trainable(&store);
        let x = g.constant(Tensor::ones(&[4]));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
    }
}
