//! Full model: frame encoder, attention stack, SD and EF heads, plus size presets.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::attention::{AttentionStack, StackConfig};
use crate::encoder::{pad_frame, EncoderConfig, Frame, FrameEncoder, FrameTensor};
use crate::error::{Error, Result};
use crate::heads::{EfHead, EfOutput, SdHead, SdMode, SdOutput};
use crate::losses::{
    ef_loss_var, sd_classification_loss_var, sd_regression_loss_var, LossConfig,
};
use crate::numerics::{Tensor, Var};
use crate::params::{Graph, ParamLayout, ParamStore};
use crate::sampling::SdLabels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PresetName {
    Full,
    Reduced1,
    Reduced2,
    Toy,
}

impl PresetName {
    pub const ALL: [PresetName; 4] = [Self::Full, Self::Reduced1, Self::Reduced2, Self::Toy];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Reduced1 => "reduced1",
            Self::Reduced2 => "reduced2",
            Self::Toy => "toy",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

/// Model sizes. `frame_size` is the raw frame side before padding to the
/// encoder input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: PresetName,
    pub stack: StackConfig,
    pub encoder: EncoderConfig,
    pub frame_size: usize,
}

impl Preset {
    fn build(
        name: PresetName,
        (nb, nd, dff, nf): (usize, usize, usize, usize),
        (input_size, stem_channels, num_stages): (usize, usize, usize),
        frame_size: usize,
    ) -> Self {
        Self {
            name,
            stack: StackConfig::new(nb, nd, dff, nf),
            encoder: EncoderConfig {
                input_size,
                stem_channels,
                num_stages,
                embed_dim: nd,
                dropout_p: 0.1,
            },
            frame_size,
        }
    }

    pub fn new(name: PresetName) -> Self {
        match name {
            PresetName::Full => Self::build(name, (16, 1024, 8192, 128), (128, 32, 4), 112),
            PresetName::Reduced1 => Self::build(name, (4, 256, 1024, 64), (64, 8, 4), 56),
            PresetName::Reduced2 => Self::build(name, (1, 128, 512, 64), (32, 4, 3), 28),
            PresetName::Toy => Self::build(name, (2, 32, 64, 32), (32, 4, 3), 28),
        }
    }

    /// Clip length `nF`.
    pub fn num_frames(&self) -> usize {
        self.stack.max_seq
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.stack.dropout_p = p;
        self.encoder.dropout_p = p;
        self
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse().map(Self::new)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub encoder: usize,
    pub stack: usize,
    pub stack_closed_form: usize,
    pub sd_head: usize,
    pub ef_head: usize,
    pub total: usize,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub fused: Var,
    /// `[nF]` signal or `[nF, 3]` probabilities.
    pub sd: Var,
    /// `[1]` scaled EF.
    pub ef: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sd: SdOutput,
    pub ef: EfOutput,
    pub fused: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    preset: Preset,
    layout: ParamLayout,
    encoder: FrameEncoder,
    stack: AttentionStack,
    sd_head: SdHead,
    ef_head: EfHead,
    encode_padded: bool,
}

impl Model {
    pub fn new(preset: Preset, sd_mode: SdMode) -> Result<Self> {
        if preset.encoder.embed_dim != preset.stack.embed_dim {
            return Err(Error::Config("encoder and stack widths differ".into()));
        }
        if preset.frame_size > preset.encoder.input_size {
            return Err(Error::Config(format!(
                "frame size {} exceeds encoder input {}",
                preset.frame_size, preset.encoder.input_size
            )));
        }
        let mut layout = ParamLayout::new();
        let encoder = FrameEncoder::register(&mut layout, "encoder", preset.encoder)?;
        let stack = AttentionStack::register(&mut layout, "stack", preset.stack)?;
        let nd = preset.stack.embed_dim;
        let sd_head = SdHead::register(&mut layout, "sd_head", nd, sd_mode);
        let ef_head = EfHead::register(&mut layout, "ef_head", nd);
        Ok(Self {
            preset,
            layout,
            encoder,
            stack,
            sd_head,
            ef_head,
            encode_padded: false,
        })
    }

    /// Also run the encoder on padded frames instead of leaving their rows at zero.
    /// Live outputs are identical either way; this exists for masking checks.
    pub fn with_padded_encoding(mut self, on: bool) -> Self {
        self.encode_padded = on;
        self
    }

    pub fn preset(&self) -> &Preset {
        &self.preset
    }

    pub fn sd_mode(&self) -> SdMode {
        self.sd_head.mode()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn encoder(&self) -> &FrameEncoder {
        &self.encoder
    }

    pub fn stack(&self) -> &AttentionStack {
        &self.stack
    }

    pub fn sd_head(&self) -> &SdHead {
        &self.sd_head
    }

    pub fn ef_head(&self) -> &EfHead {
        &self.ef_head
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        self.layout.materialize(rng)
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        ParamBreakdown {
            encoder: self.layout.count_prefix("encoder."),
            stack: self.layout.count_prefix("stack."),
            stack_closed_form: self.preset.stack.closed_form_param_count(),
            sd_head: self.layout.count_prefix("sd_head."),
            ef_head: self.layout.count_prefix("ef_head."),
            total: self.layout.count(),
        }
    }

    fn check_store(&self, store: &ParamStore) -> Result<()> {
        if store.matches(&self.layout) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "parameters do not match the {} / {} model",
                self.preset.name,
                self.sd_mode()
            )))
        }
    }

    fn tensorize(&self, frame: &Frame) -> Result<FrameTensor> {
        pad_frame(frame, self.preset.encoder.input_size)
    }

    /// Encodes each distinct frame once (frames are matched by identity) and
    /// arranges the embeddings into a `[frames.len(), nD]` matrix; rows of
    /// skipped padded frames stay zero.
    pub fn embed_clip(&self, g: &Graph, frames: &[Arc<Frame>], mask: &[bool]) -> Result<Var> {
        if frames.len() != mask.len() {
            return Err(Error::shape("embed_clip", &[frames.len()], &[mask.len()]));
        }
        let mut unique: Vec<&Arc<Frame>> = Vec::new();
        let mut index: HashMap<*const Frame, usize> = HashMap::new();
        let sources: Vec<Option<usize>> = frames
            .iter()
            .zip(mask)
            .map(|(f, &live)| {
                (live || self.encode_padded).then(|| {
                    *index.entry(Arc::as_ptr(f)).or_insert_with(|| {
                        unique.push(f);
                        unique.len() - 1
                    })
                })
            })
            .collect();
        if unique.is_empty() {
            return Err(Error::DegenerateRow("embed_clip"));
        }
        let tensors = unique
            .iter()
            .map(|f| self.tensorize(f))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&FrameTensor> = tensors.iter().collect();
        let e = self.encoder.embed(g, &refs)?;
        g.gather_rows(e, &sources)
    }

    /// Stack and heads on precomputed embeddings `e` (`[n, nD]`).
    pub fn forward_embeddings(&self, g: &Graph, e: Var, mask: &[bool]) -> Result<ModelVars> {
        let e = g.dropout(e, self.preset.encoder.dropout_p)?;
        let stack = self.stack.forward(g, e, mask)?;
        Ok(ModelVars {
            fused: stack.fused,
            sd: self.sd_head.forward(g, stack.fused)?,
            ef: self.ef_head.forward(g, stack.fused, mask)?,
        })
    }

    pub fn forward(&self, g: &Graph, frames: &[Arc<Frame>], mask: &[bool]) -> Result<ModelVars> {
        self.check_store(g.store())?;
        let e = self.embed_clip(g, frames, mask)?;
        self.forward_embeddings(g, e, mask)
    }

    /// `L_EF + L_SD` for one clip.
    pub fn loss(
        &self,
        g: &Graph,
        vars: &ModelVars,
        labels: &SdLabels,
        mask: &[bool],
        ef_target: f64,
        cfg: &LossConfig,
    ) -> Result<Var> {
        let ef = ef_loss_var(g, vars.ef, ef_target, cfg)?;
        let sd = match (labels, self.sd_mode()) {
            (SdLabels::Regression(l), SdMode::Regression) => {
                sd_regression_loss_var(g, vars.sd, l, mask)?
            }
            (SdLabels::Classification(l), SdMode::Classification) => {
                sd_classification_loss_var(g, vars.sd, l, &cfg.ce_weights, mask)?
            }
            _ => {
                return Err(Error::Config(format!(
                    "labels do not match the {} head",
                    self.sd_mode()
                )))
            }
        };
        g.add(ef, sd)
    }

    fn read(&self, g: &Graph, vars: &ModelVars) -> Result<Prediction> {
        Ok(Prediction {
            sd: SdOutput::from_tensor(self.sd_mode(), &g.value(vars.sd))?,
            ef: EfOutput(g.value(vars.ef).item()),
            fused: (*g.value(vars.fused)).clone(),
        })
    }

    pub fn predict(&self, store: &ParamStore, frames: &[Arc<Frame>], mask: &[bool]) -> Result<Prediction> {
        let g = Graph::inference(store);
        let vars = self.forward(&g, frames, mask)?;
        self.read(&g, &vars)
    }

    /// Deterministic per-frame embeddings, `[frames.len(), nD]`.
    pub fn embed_frames(&self, store: &ParamStore, frames: &[Arc<Frame>]) -> Result<Tensor> {
        self.check_store(store)?;
        let g = Graph::inference(store);
        let e = self.embed_clip(&g, frames, &vec![true; frames.len()])?;
        Ok((*g.value(e)).clone())
    }

    pub fn predict_embeddings(&self, store: &ParamStore, e: Tensor, mask: &[bool]) -> Result<Prediction> {
        self.check_store(store)?;
        let g = Graph::inference(store);
        let e = g.constant(e);
        let vars = self.forward_embeddings(&g, e, mask)?;
        self.read(&g, &vars)
    }
}

/// Parameter counts for a preset without allocating its weights.
pub fn param_breakdown(preset: PresetName, sd_mode: SdMode) -> Result<ParamBreakdown> {
    Ok(Model::new(Preset::new(preset), sd_mode)?.param_breakdown())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frames(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Arc<Frame>> {
        (0..n)
            .map(|_| {
                let px = (0..size * size).map(|_| rng.random::<u8>()).collect();
                Arc::new(Frame::new(size, size, px).unwrap())
            })
            .collect()
    }

    #[test]
    fn preset_table() {
        let t = |p: PresetName| {
            let s = Preset::new(p).stack;
            (s.num_layers, s.embed_dim, s.ff_dim, s.max_seq)
        };
        assert_eq!(t(PresetName::Full), (16, 1024, 8192, 128));
        assert_eq!(t(PresetName::Reduced1), (4, 256, 1024, 64));
        assert_eq!(t(PresetName::Reduced2), (1, 128, 512, 64));
        assert_eq!(t(PresetName::Toy), (2, 32, 64, 32));
        assert_eq!("Reduced2".parse::<PresetName>().unwrap(), PresetName::Reduced2);
        assert!("huge".parse::<PresetName>().is_err());
    }

    #[test]
    fn full_preset_counts() {
        let b = param_breakdown(PresetName::Full, SdMode::Regression).unwrap();
        assert_eq!(b.stack, b.stack_closed_form);
        assert_eq!(b.stack, 335_953_920);
        assert_eq!(b.total, b.encoder + b.stack + b.sd_head + b.ef_head);
        assert!((300_000_000..=400_000_000).contains(&b.total), "{}", b.total);
    }

    #[test]
    fn predict_shapes_and_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [SdMode::Regression, SdMode::Classification] {
            let model = Model::new(Preset::new(PresetName::Toy), mode).unwrap();
            let store = model.init(&mut rng);
            let fr = frames(32, 28, &mut rng);
            let mut mask = vec![true; 32];
            mask[30] = false;
            mask[31] = false;
            let p = model.predict(&store, &fr, &mask).unwrap();
            assert_eq!(p.sd.len(), 32);
            assert_eq!(p.sd.mode(), mode);
            assert!(p.ef.0 > 0.0 && p.ef.0 < 1.0);
            assert_eq!(p.fused.shape(), &[32, 32]);
        }
    }

    #[test]
    fn repeated_frames_match_distinct_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(Preset::new(PresetName::Toy), SdMode::Regression).unwrap();
        let store = model.init(&mut rng);
        let base = frames(3, 28, &mut rng);
        let shared: Vec<Arc<Frame>> = (0..8).map(|i| Arc::clone(&base[[0, 1, 2, 1][i % 4]])).collect();
        let copies: Vec<Arc<Frame>> = shared.iter().map(|f| Arc::new((**f).clone())).collect();
        let mask = vec![true; 8];
        let a = model.predict(&store, &shared, &mask).unwrap();
        let b = model.predict(&store, &copies, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn padded_encoding_leaves_live_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::new(Preset::new(PresetName::Toy), SdMode::Regression).unwrap();
        let store = model.init(&mut rng);
        let fr = frames(10, 28, &mut rng);
        let mask: Vec<bool> = (0..10).map(|i| i < 7).collect();
        let a = model.predict(&store, &fr, &mask).unwrap();
        let b = model
            .clone()
            .with_padded_encoding(true)
            .predict(&store, &fr, &mask)
            .unwrap();
        assert!((a.ef.0 - b.ef.0).abs() < 1e-12);
        let (SdOutput::Regression(sa), SdOutput::Regression(sb)) = (&a.sd, &b.sd) else {
            panic!()
        };
        for f in 0..7 {
            assert!((sa[f] - sb[f]).abs() < 1e-12);
        }
    }

    #[test]
    fn store_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reg = Model::new(Preset::new(PresetName::Toy), SdMode::Regression).unwrap();
        let cla = Model::new(Preset::new(PresetName::Toy), SdMode::Classification).unwrap();
        let store = cla.init(&mut rng);
        let fr = frames(4, 28, &mut rng);
        assert!(matches!(reg.predict(&store, &fr, &[true; 4]), Err(Error::Config(_))));
    }
}
