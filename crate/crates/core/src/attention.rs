//! BERT-style attention stack with key masking and multi-layer fusion.
//!
//! Per layer `k`, with `E` the layer input:
//!
//! ```text
//! S = softmax(Q(E) K(E)ᵀ / sqrt(nD/nH)) V(E)        (per head, masked keys)
//! A = LayerNorm(D_a(S) + E)
//! B = LayerNorm(D_c(GELU(D_b(A))) + S)
//! ```
//!
//! Layers cascade. The fused output averages the position-augmented input and
//! every layer output, with masked rows zeroed first.

use crate::error::{Error, Result};
use crate::numerics::{Activation, Tensor, Var};
use crate::params::{Graph, Init, LayerNorm, Linear, ParamId, ParamLayout, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackConfig {
    /// `nB`
    pub num_layers: usize,
    /// `nD`
    pub embed_dim: usize,
    /// `nH`
    pub num_heads: usize,
    /// Width of the intermediate dense layer.
    pub ff_dim: usize,
    pub max_seq: usize,
    pub dropout_p: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self::new(16, 1024, 8192, 128)
    }
}

impl StackConfig {
    /// Heads default to the layer count, dropout to 0.1.
    pub fn new(num_layers: usize, embed_dim: usize, ff_dim: usize, max_seq: usize) -> Self {
        Self {
            num_layers,
            embed_dim,
            num_heads: num_layers,
            ff_dim,
            max_seq,
            dropout_p: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.ff_dim == 0 || self.max_seq == 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!("invalid stack config {self:?}")));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {}", self.dropout_p)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Attention score divisor `sqrt(nD/nH)`.
    pub fn score_divisor(&self) -> f64 {
        (self.head_dim() as f64).sqrt()
    }

    /// `nB·(4(nD²+nD) + nD·dFF + dFF + dFF·nD + nD + 4nD) + max_seq·nD`
    pub fn closed_form_param_count(&self) -> usize {
        let (nb, nd, ff) = (self.num_layers, self.embed_dim, self.ff_dim);
        nb * (4 * (nd * nd + nd) + nd * ff + ff + ff * nd + nd + 4 * nd) + self.max_seq * nd
    }
}

/// Embeddings with a live/padded mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl EmbeddingSequence {
    pub fn new(values: Tensor, mask: Vec<bool>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] != mask.len() {
            return Err(Error::shape("EmbeddingSequence", values.shape(), &[mask.len()]));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::DegenerateRow("EmbeddingSequence"));
        }
        Ok(Self { values, mask })
    }

    pub fn all_live(values: Tensor) -> Result<Self> {
        let n = values.shape().first().copied().unwrap_or(0);
        Self::new(values, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// `D_{k,a}`
    pub attn_out: Linear,
    /// `D_{k,b}`
    pub ff_in: Linear,
    /// `D_{k,c}`
    pub ff_out: Linear,
    pub ln_attn: LayerNorm,
    pub ln_out: LayerNorm,
}

impl LayerParams {
    pub fn register(layout: &mut ParamLayout, prefix: &str, cfg: &StackConfig) -> Self {
        let (nd, ff) = (cfg.embed_dim, cfg.ff_dim);
        Self {
            query: layout.linear(&format!("{prefix}.query"), nd, nd),
            key: layout.linear(&format!("{prefix}.key"), nd, nd),
            value: layout.linear(&format!("{prefix}.value"), nd, nd),
            attn_out: layout.linear(&format!("{prefix}.attn_out"), nd, nd),
            ff_in: layout.linear(&format!("{prefix}.ff_in"), nd, ff),
            ff_out: layout.linear(&format!("{prefix}.ff_out"), ff, nd),
            ln_attn: layout.layer_norm(&format!("{prefix}.ln_attn"), nd),
            ln_out: layout.layer_norm(&format!("{prefix}.ln_out"), nd),
        }
    }
}

/// Masked multi-head self-attention `S_k(E)`.
pub fn self_attention(
    g: &Graph,
    e: Var,
    layer: &LayerParams,
    cfg: &StackConfig,
    mask: &[bool],
) -> Result<Var> {
    let q = layer.query.forward(g, e)?;
    let k = layer.key.forward(g, e)?;
    let v = layer.value.forward(g, e)?;
    let inv_div = 1.0 / cfg.score_divisor();
    let hd = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (qh, kh, vh) = if cfg.num_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * hd, hd)?,
                g.slice_cols(k, h * hd, hd)?,
                g.slice_cols(v, h * hd, hd)?,
            )
        };
        let scores = g.matmul(qh, g.transpose(kh)?)?;
        let scores = g.scale(scores, inv_div)?;
        let probs = g.masked_softmax(scores, mask)?;
        heads.push(g.matmul(probs, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        g.concat_cols(&heads)
    }
}

fn attention_block_from(
    g: &Graph,
    e: Var,
    s: Var,
    layer: &LayerParams,
    cfg: &StackConfig,
) -> Result<Var> {
    let projected = g.dropout(layer.attn_out.forward(g, s)?, cfg.dropout_p)?;
    layer.ln_attn.forward(g, g.add(projected, e)?)
}

/// `A_k(E) = LayerNorm(D_a(S_k(E)) + E)`
pub fn attention_block(
    g: &Graph,
    e: Var,
    layer: &LayerParams,
    cfg: &StackConfig,
    mask: &[bool],
) -> Result<Var> {
    let s = self_attention(g, e, layer, cfg, mask)?;
    attention_block_from(g, e, s, layer, cfg)
}

/// `B_k(E) = LayerNorm(D_c(GELU(D_b(A_k(E)))) + S_k(E))`
pub fn encoder_layer(
    g: &Graph,
    e: Var,
    layer: &LayerParams,
    cfg: &StackConfig,
    mask: &[bool],
) -> Result<Var> {
    let s = self_attention(g, e, layer, cfg, mask)?;
    let a = attention_block_from(g, e, s, layer, cfg)?;
    let h = g.activation(layer.ff_in.forward(g, a)?, Activation::Gelu)?;
    let h = g.dropout(layer.ff_out.forward(g, h)?, cfg.dropout_p)?;
    layer.ln_out.forward(g, g.add(h, s)?)
}

/// Handles produced by [`AttentionStack::forward`].
#[derive(Debug, Clone)]
pub struct StackVars {
    /// Input plus positional embeddings.
    pub input: Var,
    pub layer_outputs: Vec<Var>,
    pub fused: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackOutput {
    pub layer_outputs: Vec<Tensor>,
    pub fused: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    config: StackConfig,
    positions: ParamId,
    layers: Vec<LayerParams>,
}

impl AttentionStack {
    pub fn register(layout: &mut ParamLayout, prefix: &str, config: StackConfig) -> Result<Self> {
        config.validate()?;
        let positions = layout.add(
            format!("{prefix}.positions"),
            &[config.max_seq, config.embed_dim],
            Init::Uniform(0.02),
        );
        let layers = (0..config.num_layers)
            .map(|k| LayerParams::register(layout, &format!("{prefix}.layer{k}"), &config))
            .collect();
        Ok(Self {
            config,
            positions,
            layers,
        })
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn positions(&self) -> ParamId {
        self.positions
    }

    /// Runs the cascade on `e` (`[nF, nD]`) and fuses the results.
    pub fn forward(&self, g: &Graph, e: Var, mask: &[bool]) -> Result<StackVars> {
        let shape = g.shape(e);
        let [n, d] = *shape.as_slice() else {
            return Err(Error::shape("run_stack", &shape, &[mask.len(), self.config.embed_dim]));
        };
        if n > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_seq,
            });
        }
        if d != self.config.embed_dim || mask.len() != n {
            return Err(Error::shape("run_stack", &shape, &[mask.len(), self.config.embed_dim]));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::DegenerateRow("run_stack"));
        }
        let pos = g.slice_rows(g.param(self.positions), 0, n)?;
        let input = g.add(e, pos)?;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let mut h = input;
        for layer in &self.layers {
            h = encoder_layer(g, h, layer, &self.config, mask)?;
            layer_outputs.push(h);
        }
        let row_mask: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let mut terms = Vec::with_capacity(layer_outputs.len() + 1);
        terms.push(g.scale_rows(input, &row_mask)?);
        for &o in &layer_outputs {
            terms.push(g.scale_rows(o, &row_mask)?);
        }
        let total = g.add_n(&terms)?;
        let fused = g.scale(total, 1.0 / (self.layers.len() + 1) as f64)?;
        Ok(StackVars {
            input,
            layer_outputs,
            fused,
        })
    }

    /// Inference convenience over plain tensors.
    pub fn run(&self, store: &ParamStore, seq: &EmbeddingSequence) -> Result<StackOutput> {
        let g = Graph::inference(store);
        let e = g.constant(seq.values.clone());
        let out = self.forward(&g, e, &seq.mask)?;
        Ok(StackOutput {
            layer_outputs: out
                .layer_outputs
                .iter()
                .map(|&v| (*g.value(v)).clone())
                .collect(),
            fused: (*g.value(out.fused)).clone(),
        })
    }
}
