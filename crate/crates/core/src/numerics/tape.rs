//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied during a forward pass. Nodes are
//! appended in evaluation order, so walking them backwards is a valid
//! topological order for the chain rule.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{self, Activation};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient to one optional gradient per parent. The flags
/// say which parents actually need a gradient.
type Backward = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn variable(&self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value.into(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value.into(), false)
    }

    fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, parents: &[Var], backward: Backward) -> Var {
        let requires_grad = parents.iter().any(|&p| self.requires_grad(p));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(nodes.len() - 1)
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.0].value;
        if out.len() != 1 {
            return Err(Error::shape("backward", out.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(out.shape().to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            // Intermediate gradients are released once propagated; leaves keep theirs.
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &needs);
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, *need) else {
                    continue;
                };
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[p] = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // -----------------------------------------------------------------------
    // Elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Arc<Tensor>, Arc<Tensor>)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, va.shape(), vb.shape()));
        }
        Ok((va, vb))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.same_shape("add", a, b)?;
        let y = va.zip_map(&vb, |x, y| x + y)?;
        Ok(self.push(
            y,
            &[a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.same_shape("sub", a, b)?;
        let y = va.zip_map(&vb, |x, y| x - y)?;
        Ok(self.push(
            y,
            &[a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.same_shape("mul", a, b)?;
        let y = va.zip_map(&vb, |x, y| x * y)?;
        Ok(self.push(
            y,
            &[a, b],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&vb, |g, b| g * b).expect("shape")),
                    needs[1].then(|| g.zip_map(&va, |g, a| g * a).expect("shape")),
                ]
            }),
        ))
    }

    /// Sum of several same-shaped values.
    pub fn add_n(&self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or(Error::EmptyInput("add_n"))?;
        let mut acc = (*self.value(first)).clone();
        for &t in rest {
            let v = self.value(t);
            if v.shape() != acc.shape() {
                return Err(Error::shape("add_n", acc.shape(), v.shape()));
            }
            acc.add_assign(&v);
        }
        let n = terms.len();
        Ok(self.push(
            acc,
            terms,
            Box::new(move |g, _| (0..n).map(|_| Some(g.clone())).collect()),
        ))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let y = self.value(a).map(|v| v * factor);
        Ok(self.push(
            y,
            &[a],
            Box::new(move |g, _| vec![Some(g.map(|v| v * factor))]),
        ))
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let y = va.map(f64::abs);
        Ok(self.push(
            y,
            &[a],
            Box::new(move |g, _| {
                vec![Some(
                    g.zip_map(&va, |g, x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })
                        .expect("shape"),
                )]
            }),
        ))
    }

    /// Natural log of `max(x, floor)`; the clamped region has zero gradient.
    pub fn ln_clamped(&self, a: Var, floor: f64) -> Result<Var> {
        let va = self.value(a);
        let y = va.map(|x| x.max(floor).ln());
        Ok(self.push(
            y,
            &[a],
            Box::new(move |g, _| {
                vec![Some(
                    g.zip_map(&va, |g, x| if x > floor { g / x } else { 0.0 })
                        .expect("shape"),
                )]
            }),
        ))
    }

    pub fn activation(&self, a: Var, kind: Activation) -> Result<Var> {
        let va = self.value(a);
        let y = kernels::activation(kind, &va);
        let vy = Arc::new(y.clone());
        Ok(self.push(
            y,
            &[a],
            Box::new(move |g, _| {
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .zip(vy.data())
                    .map(|((&g, &x), &y)| g * kind.derivative(x, y))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d).expect("shape"))]
            }),
        ))
    }

    // -----------------------------------------------------------------------
    // Reductions

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let y = Tensor::scalar(va.sum());
        Ok(self.push(
            y,
            &[a],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        ))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::EmptyInput("mean"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums the last axis: `[.., d] -> [..]` (a rank-1 input gives `[1]`).
    pub fn row_sum(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let d = va.last_dim();
        let rows = va.rows();
        let sums: Vec<f64> = (0..rows).map(|r| va.row(r).iter().sum()).collect();
        let shape = if va.rank() > 1 {
            va.shape()[..va.rank() - 1].to_vec()
        } else {
            vec![1]
        };
        let in_shape = va.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, sums)?,
            &[a],
            Box::new(move |g, _| {
                let mut d_in = Vec::with_capacity(rows * d);
                for &gv in g.data() {
                    d_in.extend(std::iter::repeat_n(gv, d));
                }
                vec![Some(Tensor::new(in_shape.clone(), d_in).expect("shape"))]
            }),
        ))
    }

    // -----------------------------------------------------------------------
    // Linear algebra

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let y = kernels::matmul(&va, &vb)?;
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        Ok(self.push(
            y,
            &[a, b],
            Box::new(move |g, needs| {
                let da = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    kernels::matmul_nt(g.data(), vb.data(), &mut d, m, n, k);
                    Tensor::new(vec![m, k], d).expect("shape")
                });
                let db = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    kernels::matmul_tn(va.data(), g.data(), &mut d, k, m, n);
                    Tensor::new(vec![k, n], d).expect("shape")
                });
                vec![da, db]
            }),
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let y = kernels::transpose(&self.value(a))?;
        Ok(self.push(
            y,
            &[a],
            Box::new(|g, _| vec![Some(kernels::transpose(g).expect("matrix"))]),
        ))
    }

    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let y = kernels::linear(&vx, &vw, &vb)?;
        let rows = vx.rows();
        let (d_in, d_out) = (vw.shape()[0], vw.shape()[1]);
        Ok(self.push(
            y,
            &[x, w, b],
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut d = vec![0.0; rows * d_in];
                    kernels::matmul_nt(g.data(), vw.data(), &mut d, rows, d_out, d_in);
                    Tensor::new(vx.shape().to_vec(), d).expect("shape")
                });
                let dw = needs[1].then(|| {
                    let mut d = vec![0.0; d_in * d_out];
                    kernels::matmul_tn(vx.data(), g.data(), &mut d, d_in, rows, d_out);
                    Tensor::new(vec![d_in, d_out], d).expect("shape")
                });
                let db = needs[2].then(|| {
                    let mut d = vec![0.0; d_out];
                    for r in 0..rows {
                        for (acc, v) in d.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    Tensor::from_vec(d)
                });
                vec![dx, dw, db]
            }),
        ))
    }

    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vg = self.value(gain);
        let (y, cache) =
            kernels::layer_norm_with_cache(&self.value(x), &vg, &self.value(bias), eps)?;
        Ok(self.push(
            y,
            &[x, gain, bias],
            Box::new(move |g, _| {
                let (dx, dg, db) = kernels::layer_norm_backward(g, &vg, &cache);
                vec![Some(dx), Some(dg), Some(db)]
            }),
        ))
    }

    pub fn masked_softmax(&self, x: Var, mask: &[bool]) -> Result<Var> {
        let y = kernels::masked_softmax(&self.value(x), mask)?;
        let probs = Arc::new(y.clone());
        Ok(self.push(
            y,
            &[x],
            Box::new(move |g, _| vec![Some(kernels::softmax_backward(g, &probs))]),
        ))
    }

    pub fn softmax(&self, x: Var) -> Result<Var> {
        let mask = vec![true; self.value(x).last_dim()];
        self.masked_softmax(x, &mask)
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let vw = self.value(w);
        let (y, cache) = kernels::conv2d_with_cache(&self.value(x), &vw, &self.value(b), stride)?;
        Ok(self.push(
            y,
            &[x, w, b],
            Box::new(move |g, needs| {
                let (dx, dw, db) = kernels::conv2d_backward(g, &vw, &cache, needs[0]);
                vec![dx, Some(dw), Some(db)]
            }),
        ))
    }

    // -----------------------------------------------------------------------
    // Layout

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let in_shape = vx.shape().to_vec();
        let y = (*vx).clone().reshape(shape)?;
        Ok(self.push(
            y,
            &[x],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&in_shape).expect("size"))]),
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let [rows, cols] = *vx.shape() else {
            return Err(Error::shape("slice_cols", vx.shape(), &[0, start + len]));
        };
        if start + len > cols {
            return Err(Error::shape("slice_cols", vx.shape(), &[rows, start + len]));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            &[x],
            Box::new(move |g, _| {
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                vec![Some(Tensor::new(vec![rows, cols], d).expect("shape"))]
            }),
        ))
    }

    /// Concatenates matrices with equal row counts along the columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Arc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let rows = first.shape()[0];
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            match *v.shape() {
                [r, c] if r == rows => widths.push(c),
                _ => return Err(Error::shape("concat_cols", first.shape(), v.shape())),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            parts,
            Box::new(move |g, needs| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let start = offset;
                        offset += w;
                        need.then(|| {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(&g.row(r)[start..start + w]);
                            }
                            Tensor::new(vec![rows, w], d).expect("shape")
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let [rows, cols] = *vx.shape() else {
            return Err(Error::shape("slice_rows", vx.shape(), &[start + len, 0]));
        };
        if start + len > rows {
            return Err(Error::shape("slice_rows", vx.shape(), &[start + len, cols]));
        }
        let y = Tensor::new(
            vec![len, cols],
            vx.data()[start * cols..(start + len) * cols].to_vec(),
        )?;
        Ok(self.push(
            y,
            &[x],
            Box::new(move |g, _| {
                let mut d = vec![0.0; rows * cols];
                d[start * cols..(start + len) * cols].copy_from_slice(g.data());
                vec![Some(Tensor::new(vec![rows, cols], d).expect("shape"))]
            }),
        ))
    }

    /// Places row `i` of `x` at row `targets[i]` of a zero `[n, cols]` matrix.
    pub fn scatter_rows(&self, x: Var, targets: &[usize], n: usize) -> Result<Var> {
        let vx = self.value(x);
        let [rows, cols] = *vx.shape() else {
            return Err(Error::shape("scatter_rows", vx.shape(), &[targets.len(), 0]));
        };
        if rows != targets.len() || targets.iter().any(|&t| t >= n) {
            return Err(Error::shape("scatter_rows", vx.shape(), &[n, cols]));
        }
        let mut out = vec![0.0; n * cols];
        for (r, &t) in targets.iter().enumerate() {
            out[t * cols..(t + 1) * cols].copy_from_slice(vx.row(r));
        }
        let targets = targets.to_vec();
        Ok(self.push(
            Tensor::new(vec![n, cols], out)?,
            &[x],
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(rows * cols);
                for &t in &targets {
                    d.extend_from_slice(g.row(t));
                }
                vec![Some(Tensor::new(vec![rows, cols], d).expect("shape"))]
            }),
        ))
    }

    /// Row `i` of the result is row `sources[i]` of `x`, or zeros for `None`.
    /// Sources may repeat; their gradients accumulate.
    pub fn gather_rows(&self, x: Var, sources: &[Option<usize>]) -> Result<Var> {
        let vx = self.value(x);
        let [rows, cols] = *vx.shape() else {
            return Err(Error::shape("gather_rows", vx.shape(), &[sources.len(), 0]));
        };
        if sources.iter().flatten().any(|&s| s >= rows) {
            return Err(Error::shape("gather_rows", vx.shape(), &[sources.len(), cols]));
        }
        let n = sources.len();
        let mut out = vec![0.0; n * cols];
        for (i, s) in sources.iter().enumerate() {
            if let Some(s) = *s {
                out[i * cols..(i + 1) * cols].copy_from_slice(vx.row(s));
            }
        }
        let sources = sources.to_vec();
        Ok(self.push(
            Tensor::new(vec![n, cols], out)?,
            &[x],
            Box::new(move |g, _| {
                let mut d = vec![0.0; rows * cols];
                for (i, s) in sources.iter().enumerate() {
                    if let Some(s) = *s {
                        for (a, b) in d[s * cols..(s + 1) * cols].iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
                vec![Some(Tensor::new(vec![rows, cols], d).expect("shape"))]
            }),
        ))
    }

    /// Multiplies row `r` of a matrix by `weights[r]` (a constant).
    pub fn scale_rows(&self, x: Var, weights: &[f64]) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || vx.shape()[0] != weights.len() {
            return Err(Error::shape("scale_rows", vx.shape(), &[weights.len()]));
        }
        let cols = vx.shape()[1];
        let apply = {
            let weights = weights.to_vec();
            move |t: &Tensor| {
                let mut d = t.data().to_vec();
                for (r, w) in weights.iter().enumerate() {
                    for v in &mut d[r * cols..(r + 1) * cols] {
                        *v *= w;
                    }
                }
                Tensor::new(t.shape().to_vec(), d).expect("shape")
            }
        };
        let y = apply(&vx);
        Ok(self.push(y, &[x], Box::new(move |g, _| vec![Some(apply(g))])))
    }
}
