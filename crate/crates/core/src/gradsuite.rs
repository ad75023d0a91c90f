//! Finite-difference checks for every differentiable building block, from
//! single tape ops up to the full attention stack and both heads.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_block, encoder_layer, self_attention, AttentionStack, LayerParams, StackConfig};
use crate::encoder::{EncoderConfig, FrameEncoder, FrameTensor};
use crate::error::{Error, Result};
use crate::heads::{EfHead, SdHead, SdMode, NUM_CLASSES};
use crate::losses::{ef_loss_var, sd_classification_loss_var, sd_regression_loss_var, LossConfig};
use crate::numerics::{
    compare_gradients, grad_check, weighted_sum, Activation, GradCheckReport, Tape, Tensor, Var, LAYER_NORM_EPS,
};
use crate::params::{Graph, ParamLayout, ParamStore};

/// Names accepted by [`check_op`], in suite order.
pub const OPS: &[&str] = &[
    "matmul",
    "linear",
    "layer_norm",
    "gelu",
    "tanh",
    "sigmoid",
    "masked_softmax",
    "conv2d",
    "gather_rows",
    "self_attention",
    "attention_block",
    "encoder_layer",
    "run_stack",
    "encode_frames",
    "sd_regress",
    "sd_classify",
    "ef_regress",
    "ef_loss",
    "sd_regression_loss",
    "sd_classification_loss",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub seeds: usize,
    pub eps: f64,
    pub tol: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            eps: 5e-5,
            tol: 1e-4,
        }
    }
}

/// Worst case of one op over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct OpSummary {
    pub op_name: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub passed: bool,
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<OpSummary>> {
    OPS.iter().map(|op| run_op(op, cfg)).collect()
}

pub fn run_op(op: &str, cfg: &SuiteConfig) -> Result<OpSummary> {
    if cfg.seeds == 0 {
        return Err(Error::Config("gradient suite needs at least one seed".into()));
    }
    let mut summary = OpSummary {
        op_name: op.to_string(),
        seeds: cfg.seeds,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        passed: true,
    };
    for seed in 0..cfg.seeds as u64 {
        let r = check_op(op, seed, cfg.eps, cfg.tol)?;
        summary.max_rel_err = summary.max_rel_err.max(r.max_rel_err);
        summary.max_abs_err = summary.max_abs_err.max(r.max_abs_err);
        summary.checked += r.checked;
        summary.passed &= r.passed;
    }
    Ok(summary)
}

// toy shapes
const N: usize = 4;
const D: usize = 16;
const FF: usize = 32;
const LAYERS: usize = 2;

fn toy_stack() -> StackConfig {
    let mut cfg = StackConfig::new(LAYERS, D, FF, N);
    cfg.dropout_p = 0.0;
    cfg
}

fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        input_size: 16,
        stem_channels: 2,
        num_stages: 2,
        embed_dim: 8,
        dropout_p: 0.0,
    }
}

/// One seed of one op.
pub fn check_op(op: &str, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = random_mask(N, &mut rng);
    let ck = Check { op, eps, tol, w_seed: rng.random() };
    match op {
        "matmul" => {
            let inputs = [Tensor::uniform(&[3, 5], 1.0, &mut rng), Tensor::uniform(&[5, 2], 1.0, &mut rng)];
            ck.tape(&inputs, |t, v| t.matmul(v[0], v[1]))
        }
        "linear" => {
            let inputs = [
                Tensor::uniform(&[N, 6], 1.0, &mut rng),
                Tensor::uniform(&[6, 5], 1.0, &mut rng),
                Tensor::uniform(&[5], 1.0, &mut rng),
            ];
            ck.tape(&inputs, |t, v| t.linear(v[0], v[1], v[2]))
        }
        "layer_norm" => {
            let inputs = [
                Tensor::uniform(&[N, 8], 2.0, &mut rng),
                Tensor::uniform(&[8], 1.5, &mut rng),
                Tensor::uniform(&[8], 1.0, &mut rng),
            ];
            ck.tape(&inputs, |t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS))
        }
        "gelu" | "tanh" | "sigmoid" => {
            let kind: Activation = op.parse()?;
            let inputs = [Tensor::uniform(&[N, 5], 3.0, &mut rng)];
            ck.tape(&inputs, |t, v| t.activation(v[0], kind))
        }
        "masked_softmax" => {
            let inputs = [Tensor::uniform(&[N, N], 2.0, &mut rng)];
            ck.tape(&inputs, |t, v| t.masked_softmax(v[0], &mask))
        }
        "conv2d" => {
            let stride = rng.random_range(1..=2);
            let inputs = [
                Tensor::uniform(&[2, 2, 6, 6], 1.0, &mut rng),
                Tensor::uniform(&[3, 2, 3, 3], 0.5, &mut rng),
                Tensor::uniform(&[3], 0.5, &mut rng),
            ];
            ck.tape(&inputs, |t, v| t.conv2d(v[0], v[1], v[2], stride))
        }
        "gather_rows" => {
            let sources: Vec<Option<usize>> = (0..6)
                .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..3)))
                .collect();
            let inputs = [Tensor::uniform(&[3, 4], 1.0, &mut rng)];
            ck.tape(&inputs, |t, v| t.gather_rows(v[0], &sources))
        }
        "self_attention" | "attention_block" | "encoder_layer" => {
            let cfg = toy_stack();
            let mut layout = ParamLayout::new();
            let layer = LayerParams::register(&mut layout, "layer", &cfg);
            let e = Tensor::uniform(&[N, D], 1.0, &mut rng);
            ck.graph(&layout, vec![e], &mut rng, |g, v| match op {
                "self_attention" => self_attention(g, v[0], &layer, &cfg, &mask),
                "attention_block" => attention_block(g, v[0], &layer, &cfg, &mask),
                _ => encoder_layer(g, v[0], &layer, &cfg, &mask),
            })
        }
        "run_stack" => {
            let mut layout = ParamLayout::new();
            let stack = AttentionStack::register(&mut layout, "stack", toy_stack())?;
            let e = Tensor::uniform(&[N, D], 1.0, &mut rng);
            ck.graph(&layout, vec![e], &mut rng, |g, v| Ok(stack.forward(g, v[0], &mask)?.fused))
        }
        "encode_frames" => {
            let cfg = toy_encoder();
            let mut layout = ParamLayout::new();
            let encoder = FrameEncoder::register(&mut layout, "encoder", cfg)?;
            let s = cfg.input_size;
            let frames = (0..2)
                .map(|_| FrameTensor::new(s, (0..s * s).map(|_| rng.random::<f64>()).collect()))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&FrameTensor> = frames.iter().collect();
            ck.graph(&layout, vec![], &mut rng, |g, _| encoder.embed(g, &refs))
        }
        "sd_regress" | "sd_classify" => {
            let mode = if op == "sd_regress" { SdMode::Regression } else { SdMode::Classification };
            let mut layout = ParamLayout::new();
            let head = SdHead::register(&mut layout, "sd", D, mode);
            let fused = Tensor::uniform(&[N, D], 2.0, &mut rng);
            ck.graph(&layout, vec![fused], &mut rng, |g, v| head.forward(g, v[0]))
        }
        "ef_regress" => {
            let mut layout = ParamLayout::new();
            let head = EfHead::register(&mut layout, "ef", D);
            let fused = Tensor::uniform(&[N, D], 2.0, &mut rng);
            ck.graph(&layout, vec![fused], &mut rng, |g, v| head.forward(g, v[0], &mask))
        }
        "ef_loss" => {
            // keep clear of the kink in |pred - target|
            let target = rng.random_range(0.05..0.95);
            let mut pred: f64 = rng.random_range(0.05..0.95);
            if (pred - target).abs() < 0.01 {
                pred = if target < 0.5 { target + 0.2 } else { target - 0.2 };
            }
            let cfg = LossConfig::default();
            let inputs = [Tensor::from_vec(vec![pred])];
            ck.tape(&inputs, |t, v| ef_loss_var(t, v[0], target, &cfg))
        }
        "sd_regression_loss" => {
            let labels: Vec<f64> = (0..N).map(|_| rng.random_range(-1.0..1.0)).collect();
            let inputs = [Tensor::uniform(&[N], 1.0, &mut rng)];
            ck.tape(&inputs, |t, v| sd_regression_loss_var(t, v[0], &labels, &mask))
        }
        "sd_classification_loss" => {
            let labels: Vec<Option<usize>> = mask
                .iter()
                .map(|&m| m.then(|| rng.random_range(0..NUM_CLASSES)))
                .collect();
            let weights = LossConfig::default().ce_weights;
            let inputs = [Tensor::uniform(&[N, NUM_CLASSES], 2.0, &mut rng)];
            ck.tape(&inputs, |t, v| {
                let probs = t.softmax(v[0])?;
                sd_classification_loss_var(t, probs, &labels, &weights, &mask)
            })
        }
        other => Err(Error::Config(format!("unknown gradient check `{other}`"))),
    }
}

/// At least one live entry; the last position is padded half the time.
fn random_mask(n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let live = if rng.random_bool(0.5) { n } else { rng.random_range(1..n) };
    (0..n).map(|i| i < live).collect()
}

/// Every op output `y` is reduced to the scalar `sum(w * (y - y0))`, with
/// random weights `w` and `y0` the output at the unperturbed point. The
/// offset is constant, so gradients are untouched, but the difference
/// quotient no longer rounds at the scale of `sum(w * y)`. That rounding
/// alone would swamp coordinates whose gradient is identically zero (the
/// key bias, thanks to softmax shift invariance).
struct Check<'a> {
    op: &'a str,
    eps: f64,
    tol: f64,
    w_seed: u64,
}

struct Reduction {
    weights: Arc<Tensor>,
    center: Arc<Tensor>,
}

impl Reduction {
    fn new(center: Arc<Tensor>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = center.len().max(1) as f64;
        let weights = Arc::new(Tensor::uniform(center.shape(), 1.0 / n, &mut rng));
        Self { weights, center }
    }

    fn apply(&self, tape: &Tape, y: Var) -> Result<Var> {
        let c = tape.constant(Arc::clone(&self.center));
        weighted_sum(tape, tape.sub(y, c)?, &self.weights)
    }
}

impl Check<'_> {
    fn tape<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&t, &vars)?;
        let r = Reduction::new(t.value(y), self.w_seed);
        grad_check(self.op, inputs, self.eps, self.tol, |t, v| r.apply(t, f(t, v)?))
    }

    /// Checks gradients for both the parameters in `layout` and `inputs`.
    /// Parameters are drawn from the layout initializer and then jittered so
    /// that gains and biases are away from their starting values.
    fn graph<F>(&self, layout: &ParamLayout, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&Graph, &[Var]) -> Result<Var>,
    {
        let base = layout.materialize(rng);
        let names = base.names().to_vec();
        let params: Vec<Tensor> = base
            .tensors()
            .map(|t| {
                let mut t = t.clone();
                t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.1..0.1));
                t
            })
            .collect();
        let store = ParamStore::from_parts(names.clone(), params.clone())?;
        let r = {
            let g = Graph::inference(&store);
            let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
            let y = f(&g, &vars)?;
            Reduction::new(g.value(y), self.w_seed)
        };

        let g = Graph::trainable(&store);
        let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
        let out = r.apply(&g, f(&g, &vars)?)?;
        let mut grads = g.backward(out)?;
        let mut analytic: Vec<Tensor> = g
            .param_grads(&mut grads)
            .into_iter()
            .zip(&params)
            .map(|(gr, p)| gr.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        for (v, x) in vars.iter().zip(&inputs) {
            analytic.push(grads.take(*v).unwrap_or_else(|| Tensor::zeros(x.shape())));
        }
        drop(g);

        let np = params.len();
        let mut all = params;
        all.extend(inputs);
        compare_gradients(self.op, &all, &analytic, self.eps, self.tol, |work| {
            let store = ParamStore::from_parts(names.clone(), work[..np].to_vec())?;
            let g = Graph::inference(&store);
            let vars: Vec<Var> = work[np..].iter().map(|t| g.constant(t.clone())).collect();
            let out = r.apply(&g, f(&g, &vars)?)?;
            Ok(g.value(out).item())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_one_seed() {
        for op in OPS {
            let r = check_op(op, 7, 5e-5, 1e-4).unwrap();
            assert!(r.passed, "{op}: rel {} abs {}", r.max_rel_err, r.max_abs_err);
            assert!(r.checked > 0, "{op}");
        }
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(matches!(check_op("nope", 0, 1e-6, 1e-4), Err(Error::Config(_))));
    }

    #[test]
    fn broken_gradient_is_caught() {
        // true gradient of sum(x^2) is 2x, not 1
        let inputs = [Tensor::from_vec(vec![0.3, -0.7])];
        let g_wrong = compare_gradients("fake", &inputs, &[Tensor::from_vec(vec![1.0, 1.0])], 1e-6, 1e-4, |w| {
            Ok(w[0].data().iter().map(|x| x * x).sum())
        })
        .unwrap();
        assert!(!g_wrong.passed);
    }
}
