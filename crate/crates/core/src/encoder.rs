//! Residual convolutional frame encoder.
//!
//! Architecture: 3x3 stem convolution, then `num_stages` times a residual block
//! (two 3x3 convolutions with an identity skip) followed by a stride-2
//! convolution that doubles the channel count, then flatten and a linear
//! projection to the embedding width. GELU follows every convolution.

use crate::error::{Error, Result};
use crate::numerics::{Activation, Tensor, Var};
use crate::params::{Conv, Graph, Linear, ParamLayout, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    /// Side length of the square (padded) input frame.
    pub input_size: usize,
    pub stem_channels: usize,
    pub num_stages: usize,
    /// Embedding width `nD`.
    pub embed_dim: usize,
    pub dropout_p: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            stem_channels: 8,
            num_stages: 4,
            embed_dim: 1024,
            dropout_p: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize
            .checked_shl(self.num_stages as u32)
            .ok_or_else(|| Error::Config(format!("{} stages", self.num_stages)))?;
        if self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "input_size {} not divisible by 2^{}",
                self.input_size, self.num_stages
            )));
        }
        if self.embed_dim == 0 || self.stem_channels == 0 {
            return Err(Error::Config(
                "embed_dim and stem_channels must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {}", self.dropout_p)));
        }
        Ok(())
    }

    pub fn final_side(&self) -> usize {
        self.input_size >> self.num_stages
    }

    pub fn final_channels(&self) -> usize {
        self.stem_channels << self.num_stages
    }

    /// Length of the flattened feature map fed to the projection.
    pub fn flat_len(&self) -> usize {
        self.final_channels() * self.final_side() * self.final_side()
    }
}

// ---------------------------------------------------------------------------
// Frames

/// Raw 8-bit grayscale frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape("Frame::new", &[height, width], &[pixels.len()]));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn black(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Zero-pads to `target x target`, content centered (extra pixel bottom/right).
    pub fn padded(&self, target: usize) -> Result<Frame> {
        let (top, left) = pad_offsets(self.height, self.width, target)?;
        if self.height == target && self.width == target {
            return Ok(self.clone());
        }
        let mut out = Frame::black(target, target);
        for r in 0..self.height {
            let dst = (top + r) * target + left;
            out.pixels[dst..dst + self.width]
                .copy_from_slice(&self.pixels[r * self.width..(r + 1) * self.width]);
        }
        Ok(out)
    }
}

/// Square frame normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    size: usize,
    data: Vec<f64>,
}

impl FrameTensor {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::shape("FrameTensor::new", &[size, size], &[data.len()]));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("frame intensities must lie in [0, 1]".into()));
        }
        Ok(Self { size, data })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; size * size],
        }
    }

    /// Divides by 255; the frame must already be square.
    pub fn from_frame(frame: &Frame) -> Result<Self> {
        if frame.height != frame.width {
            return Err(Error::shape(
                "FrameTensor::from_frame",
                &[frame.height, frame.width],
                &[frame.height, frame.height],
            ));
        }
        Ok(Self {
            size: frame.height,
            data: frame.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }
}

fn pad_offsets(height: usize, width: usize, target: usize) -> Result<(usize, usize)> {
    if height > target || width > target {
        return Err(Error::FrameTooLarge {
            height,
            width,
            target,
        });
    }
    Ok(((target - height) / 2, (target - width) / 2))
}

/// Zero-pads a raw frame to `target x target` and normalizes it.
pub fn pad_frame(frame: &Frame, target: usize) -> Result<FrameTensor> {
    FrameTensor::from_frame(&frame.padded(target)?)
}

// ---------------------------------------------------------------------------
// Encoder

#[derive(Debug, Clone, PartialEq, Eq)]
struct Stage {
    res_a: Conv,
    res_b: Conv,
    down: Conv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEncoder {
    config: EncoderConfig,
    stem: Conv,
    stages: Vec<Stage>,
    proj: Linear,
}

impl FrameEncoder {
    pub fn register(layout: &mut ParamLayout, prefix: &str, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let stem = layout.conv3x3(&format!("{prefix}.stem"), 1, config.stem_channels, 1);
        let mut stages = Vec::with_capacity(config.num_stages);
        let mut c = config.stem_channels;
        for s in 0..config.num_stages {
            let name = format!("{prefix}.stage{s}");
            stages.push(Stage {
                res_a: layout.conv3x3(&format!("{name}.res_a"), c, c, 1),
                res_b: layout.conv3x3(&format!("{name}.res_b"), c, c, 1),
                down: layout.conv3x3(&format!("{name}.down"), c, 2 * c, 2),
            });
            c *= 2;
        }
        let proj = layout.linear(&format!("{prefix}.proj"), config.flat_len(), config.embed_dim);
        Ok(Self {
            config,
            stem,
            stages,
            proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// The output projection, exposed for rigs that pin its weights.
    pub fn projection(&self) -> Linear {
        self.proj
    }

    /// Encodes `frames` independently into a `[frames.len(), nD]` matrix.
    pub fn forward(&self, g: &Graph, frames: &[&FrameTensor]) -> Result<Var> {
        let e = self.embed(g, frames)?;
        g.dropout(e, self.config.dropout_p)
    }

    /// Same as [`forward`](Self::forward) without the output dropout.
    pub fn embed(&self, g: &Graph, frames: &[&FrameTensor]) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("encode_clip"));
        }
        let s = self.config.input_size;
        let mut pixels = Vec::with_capacity(frames.len() * s * s);
        for f in frames {
            if f.size() != s {
                return Err(Error::Config(format!(
                    "frame of side {} given to encoder expecting {s}",
                    f.size()
                )));
            }
            pixels.extend_from_slice(f.data());
        }
        let n = frames.len();
        let mut x = g.constant(Tensor::new(vec![n, 1, s, s], pixels)?);
        x = g.activation(self.stem.forward(g, x)?, Activation::Gelu)?;
        for stage in &self.stages {
            let h = g.activation(stage.res_a.forward(g, x)?, Activation::Gelu)?;
            let h = stage.res_b.forward(g, h)?;
            x = g.activation(g.add(x, h)?, Activation::Gelu)?;
            x = g.activation(stage.down.forward(g, x)?, Activation::Gelu)?;
        }
        let flat = g.reshape(x, &[n, self.config.flat_len()])?;
        self.proj.forward(g, flat)
    }

    /// Deterministic embedding of one frame, shape `[nD]`.
    pub fn encode_frame(&self, store: &ParamStore, frame: &FrameTensor) -> Result<Tensor> {
        let g = Graph::inference(store);
        let e = self.forward(&g, &[frame])?;
        let v = g.value(e);
        (*v).clone().reshape(&[self.config.embed_dim])
    }

    /// Row `f` of the result is the embedding of `frames[f]`.
    pub fn encode_clip(&self, store: &ParamStore, frames: &[FrameTensor]) -> Result<Tensor> {
        let g = Graph::inference(store);
        let refs: Vec<&FrameTensor> = frames.iter().collect();
        let e = self.forward(&g, &refs)?;
        Ok((*g.value(e)).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            input_size: 16,
            stem_channels: 2,
            num_stages: 2,
            embed_dim: 6,
            dropout_p: 0.1,
        }
    }

    fn random_frame(size: usize, rng: &mut ChaCha8Rng) -> FrameTensor {
        FrameTensor::new(size, (0..size * size).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn pad_112_to_128_centers_content() {
        let frame = Frame::new(112, 112, vec![200; 112 * 112]).unwrap();
        let p = pad_frame(&frame, 128).unwrap();
        assert_eq!(p.size(), 128);
        for r in 0..128 {
            for c in 0..128 {
                let inside = (8..120).contains(&r) && (8..120).contains(&c);
                let expect = if inside { 200.0 / 255.0 } else { 0.0 };
                assert_eq!(p.get(r, c), expect);
            }
        }
    }

    #[test]
    fn pad_odd_borders() {
        let pixels: Vec<u8> = (1..=24).collect();
        let frame = Frame::new(4, 6, pixels).unwrap();
        let p = frame.padded(8).unwrap();
        // rows: 2 above, 2 below; cols: 1 left, 1 right
        for r in 0..8 {
            for c in 0..8 {
                let v = p.get(r, c);
                if (2..6).contains(&r) && (1..7).contains(&c) {
                    assert_eq!(v, frame.get(r - 2, c - 1));
                } else {
                    assert_eq!(v, 0);
                }
            }
        }
        assert_eq!(frame.padded(5).unwrap_err().to_string(), "frame of 4x6 does not fit into 5x5");
        let same = Frame::new(8, 8, vec![7; 64]).unwrap();
        assert_eq!(same.padded(8).unwrap(), same);
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.input_size = 18;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.input_size = 16;
        c.embed_dim = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_frame_with_zero_bias_gives_zero_embedding() {
        let mut layout = ParamLayout::new();
        let enc = FrameEncoder::register(&mut layout, "enc", small()).unwrap();
        let mut store = layout.materialize(&mut ChaCha8Rng::seed_from_u64(1));
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".bias") {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let e = enc.encode_frame(&store, &FrameTensor::zeros(16)).unwrap();
        assert_eq!(e.shape(), &[6]);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clip_rows_equal_frame_embeddings_and_permute() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layout = ParamLayout::new();
        let enc = FrameEncoder::register(&mut layout, "enc", small()).unwrap();
        let store = layout.materialize(&mut rng);
        let frames: Vec<FrameTensor> = (0..4).map(|_| random_frame(16, &mut rng)).collect();
        let clip = enc.encode_clip(&store, &frames).unwrap();
        assert_eq!(clip.shape(), &[4, 6]);
        for (f, frame) in frames.iter().enumerate() {
            let single = enc.encode_frame(&store, frame).unwrap();
            assert_eq!(clip.row(f), single.data(), "row {f} differs bitwise");
        }
        let permuted: Vec<FrameTensor> = [2, 0, 3, 1].iter().map(|&i| frames[i].clone()).collect();
        let p = enc.encode_clip(&store, &permuted).unwrap();
        for (row, &src) in [2, 0, 3, 1].iter().enumerate() {
            assert_eq!(p.row(row), clip.row(src));
        }
        let same = vec![frames[0].clone(); 3];
        let s = enc.encode_clip(&store, &same).unwrap();
        assert_eq!(s.row(0), s.row(2));
    }

    #[test]
    fn padding_border_is_content() {
        // Two frames that differ only in the zero border produce different
        // embeddings: masking happens in attention, not here.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layout = ParamLayout::new();
        let enc = FrameEncoder::register(&mut layout, "enc", small()).unwrap();
        let store = layout.materialize(&mut rng);
        let core = Frame::new(12, 12, (0..144).map(|i| (i % 251) as u8).collect()).unwrap();
        let a = pad_frame(&core, 16).unwrap();
        let mut data = a.data().to_vec();
        data[0] = 1.0;
        let b = FrameTensor::new(16, data).unwrap();
        let ea = enc.encode_frame(&store, &a).unwrap();
        let eb = enc.encode_frame(&store, &b).unwrap();
        assert!(ea.max_abs_diff(&eb) > 0.0);
    }

    #[test]
    fn rejects_wrong_size_and_empty_clip() {
        let mut layout = ParamLayout::new();
        let enc = FrameEncoder::register(&mut layout, "enc", small()).unwrap();
        let store = layout.materialize(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            enc.encode_frame(&store, &FrameTensor::zeros(8)),
            Err(Error::Config(_))
        ));
        assert!(matches!(enc.encode_clip(&store, &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn embeddings_are_finite_on_extreme_frames() {
        let mut layout = ParamLayout::new();
        let enc = FrameEncoder::register(&mut layout, "enc", small()).unwrap();
        let store = layout.materialize(&mut ChaCha8Rng::seed_from_u64(9));
        let white = FrameTensor::new(16, vec![1.0; 256]).unwrap();
        assert!(enc.encode_frame(&store, &white).unwrap().all_finite());
    }
}
