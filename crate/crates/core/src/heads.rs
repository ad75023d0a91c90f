//! Output branches: per-frame systole/diastole (SD) and clip-level ejection fraction.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Activation, Tensor, Var};
use crate::params::{Graph, LayerNorm, Linear, ParamLayout, ParamStore};

/// Class indices of the classification SD head.
pub const CLASS_TRANSITION: usize = 0;
pub const CLASS_ED: usize = 1;
pub const CLASS_ES: usize = 2;
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SdMode {
    Regression,
    Classification,
}

impl SdMode {
    pub fn output_width(self) -> usize {
        match self {
            Self::Regression => 1,
            Self::Classification => NUM_CLASSES,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Regression => "regression",
            Self::Classification => "classification",
        }
    }
}

impl fmt::Display for SdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regression" | "reg" => Ok(Self::Regression),
            "classification" | "cla" => Ok(Self::Classification),
            other => Err(Error::Config(format!("unknown SD mode `{other}`"))),
        }
    }
}

/// Per-frame SD prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum SdOutput {
    /// Signal in `[-1, 1]`; ED near +1, ES near -1.
    Regression(Vec<f64>),
    /// Per-frame `[transition, ED, ES]` probabilities.
    Classification(Vec<[f64; NUM_CLASSES]>),
}

impl SdOutput {
    pub fn len(&self) -> usize {
        match self {
            Self::Regression(s) => s.len(),
            Self::Classification(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> SdMode {
        match self {
            Self::Regression(_) => SdMode::Regression,
            Self::Classification(_) => SdMode::Classification,
        }
    }

    /// Reads a head output tensor (`[nF]` or `[nF, 3]`).
    pub fn from_tensor(mode: SdMode, t: &Tensor) -> Result<Self> {
        match mode {
            SdMode::Regression => Ok(Self::Regression(t.data().to_vec())),
            SdMode::Classification => {
                if t.last_dim() != NUM_CLASSES {
                    return Err(Error::shape("SdOutput", t.shape(), &[t.rows(), NUM_CLASSES]));
                }
                Ok(Self::Classification(
                    (0..t.rows())
                        .map(|r| {
                            let row = t.row(r);
                            [row[0], row[1], row[2]]
                        })
                        .collect(),
                ))
            }
        }
    }
}

/// Scaled ejection fraction in `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct EfOutput(pub f64);

impl EfOutput {
    pub fn percent(self) -> f64 {
        self.0 * 100.0
    }
}

/// Linear → LayerNorm → Linear → LayerNorm → Linear, then tanh or softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SdHead {
    mode: SdMode,
    hidden1: Linear,
    norm1: LayerNorm,
    hidden2: Linear,
    norm2: LayerNorm,
    out: Linear,
}

impl SdHead {
    pub fn register(layout: &mut ParamLayout, prefix: &str, embed_dim: usize, mode: SdMode) -> Self {
        let w1 = (embed_dim / 2).max(1);
        let w2 = (embed_dim / 4).max(1);
        Self {
            mode,
            hidden1: layout.linear(&format!("{prefix}.hidden1"), embed_dim, w1),
            norm1: layout.layer_norm(&format!("{prefix}.norm1"), w1),
            hidden2: layout.linear(&format!("{prefix}.hidden2"), w1, w2),
            norm2: layout.layer_norm(&format!("{prefix}.norm2"), w2),
            out: layout.linear(&format!("{prefix}.out"), w2, mode.output_width()),
        }
    }

    pub fn mode(&self) -> SdMode {
        self.mode
    }

    pub fn output_layer(&self) -> Linear {
        self.out
    }

    fn logits(&self, g: &Graph, fused: Var) -> Result<Var> {
        let h = self.norm1.forward(g, self.hidden1.forward(g, fused)?)?;
        let h = self.norm2.forward(g, self.hidden2.forward(g, h)?)?;
        self.out.forward(g, h)
    }

    /// Regression: `[nF]` signal. Classification: `[nF, 3]` probabilities.
    pub fn forward(&self, g: &Graph, fused: Var) -> Result<Var> {
        let logits = self.logits(g, fused)?;
        match self.mode {
            SdMode::Regression => {
                let n = g.shape(logits)[0];
                let flat = g.reshape(logits, &[n])?;
                g.activation(flat, Activation::Tanh)
            }
            SdMode::Classification => g.softmax(logits),
        }
    }

    pub fn predict(&self, store: &ParamStore, fused: &Tensor) -> Result<SdOutput> {
        let g = Graph::inference(store);
        let x = g.constant(fused.clone());
        let y = self.forward(&g, x)?;
        SdOutput::from_tensor(self.mode, &g.value(y))
    }
}

/// `sigmoid(mean over live frames of D2(LayerNorm(D1(fused))))`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EfHead {
    hidden: Linear,
    norm: LayerNorm,
    out: Linear,
}

impl EfHead {
    pub fn register(layout: &mut ParamLayout, prefix: &str, embed_dim: usize) -> Self {
        let w = (embed_dim / 2).max(1);
        Self {
            hidden: layout.linear(&format!("{prefix}.hidden"), embed_dim, w),
            norm: layout.layer_norm(&format!("{prefix}.norm"), w),
            out: layout.linear(&format!("{prefix}.out"), w, 1),
        }
    }

    pub fn output_layer(&self) -> Linear {
        self.out
    }

    /// Per-frame pre-average scalars, shape `[nF, 1]`.
    pub fn frame_scores(&self, g: &Graph, fused: Var) -> Result<Var> {
        let h = self.norm.forward(g, self.hidden.forward(g, fused)?)?;
        self.out.forward(g, h)
    }

    /// Returns a `[1]` value in `(0, 1)`.
    pub fn forward(&self, g: &Graph, fused: Var, mask: &[bool]) -> Result<Var> {
        let live = mask.iter().filter(|&&m| m).count();
        if live == 0 {
            return Err(Error::DegenerateRow("ef_regress"));
        }
        let scores = self.frame_scores(g, fused)?;
        let weights: Vec<f64> = mask
            .iter()
            .map(|&m| if m { 1.0 / live as f64 } else { 0.0 })
            .collect();
        let mean = g.sum(g.scale_rows(scores, &weights)?)?;
        g.activation(mean, Activation::Sigmoid)
    }

    pub fn predict(&self, store: &ParamStore, fused: &Tensor, mask: &[bool]) -> Result<EfOutput> {
        let g = Graph::inference(store);
        let x = g.constant(fused.clone());
        let y = self.forward(&g, x, mask)?;
        Ok(EfOutput(g.value(y).item()))
    }
}
