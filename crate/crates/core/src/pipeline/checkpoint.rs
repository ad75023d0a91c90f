//! Binary checkpoints.
//!
//! Layout (all integers little-endian): magic `EVTC`, `u32` version, preset,
//! training config, `u64` epoch, rng state (32-byte seed, `u64` stream,
//! `u128` word position), parameters (`u64` count, then per tensor a
//! length-prefixed UTF-8 name, `u32` rank, `u64` dims and `f64` data), and the
//! optimizer (`u64` step, then first and second moments as `f64` data in
//! parameter order).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::attention::StackConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::SdMode;
use crate::model::{Model, Preset, PresetName};
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::pipeline::config::{LrSchedule, TrainConfig};
use crate::pipeline::optim::AdamState;
use crate::sampling::Method;

pub const MAGIC: &[u8; 4] = b"EVTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub preset: Preset,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub params: ParamStore,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(self.preset, self.config.sd_mode)?;
        if !self.params.matches(model.layout()) {
            return Err(Error::Config("checkpoint parameters do not match its preset".into()));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        write_preset(&mut w, &self.preset);
        write_config(&mut w, &self.config);
        w.usize(self.epoch);
        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.0.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        w.usize(self.params.len());
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            w.str(name);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.usize(d);
            }
            w.f64s(t.data());
        }
        w.u64(self.optimizer.step);
        w.usize(self.optimizer.m.len());
        for t in self.optimizer.m.iter().chain(&self.optimizer.v) {
            w.f64s(t.data());
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.err_at(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err_at(4, &format!("unsupported checkpoint version {version}")));
        }
        let preset = read_preset(&mut r)?;
        let config = read_config(&mut r)?;
        let epoch = r.usize()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let count = r.usize()?;
        let mut names = Vec::with_capacity(count.min(1 << 16));
        let mut values = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            names.push(r.str()?);
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            values.push(Tensor::new(shape, r.f64s(n)?)?);
        }
        let params = ParamStore::from_parts(names, values)?;
        let step = r.u64()?;
        let moments = r.usize()?;
        if moments != params.len() {
            return Err(r.err(&format!("{moments} moment tensors for {} parameters", params.len())));
        }
        let read_moments = |r: &mut Reader| -> Result<Vec<Tensor>> {
            params
                .tensors()
                .map(|t| Tensor::new(t.shape().to_vec(), r.f64s(t.len())?))
                .collect()
        };
        let m = read_moments(&mut r)?;
        let v = read_moments(&mut r)?;
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        let ckpt = Self {
            preset,
            config,
            epoch,
            rng,
            params,
            optimizer: AdamState { step, m, v },
        };
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

fn write_preset(w: &mut Writer, p: &Preset) {
    w.u8(PresetName::ALL.iter().position(|&n| n == p.name).expect("known preset") as u8);
    let s = &p.stack;
    for v in [s.num_layers, s.embed_dim, s.num_heads, s.ff_dim, s.max_seq] {
        w.usize(v);
    }
    w.f64(s.dropout_p);
    let e = &p.encoder;
    for v in [e.input_size, e.stem_channels, e.num_stages, e.embed_dim] {
        w.usize(v);
    }
    w.f64(e.dropout_p);
    w.usize(p.frame_size);
}

fn read_preset(r: &mut Reader) -> Result<Preset> {
    let idx = r.u8()? as usize;
    let name = *PresetName::ALL.get(idx).ok_or_else(|| r.err("unknown preset id"))?;
    let stack = StackConfig {
        num_layers: r.usize()?,
        embed_dim: r.usize()?,
        num_heads: r.usize()?,
        ff_dim: r.usize()?,
        max_seq: r.usize()?,
        dropout_p: r.f64()?,
    };
    let encoder = EncoderConfig {
        input_size: r.usize()?,
        stem_channels: r.usize()?,
        num_stages: r.usize()?,
        embed_dim: r.usize()?,
        dropout_p: r.f64()?,
    };
    Ok(Preset {
        name,
        stack,
        encoder,
        frame_size: r.usize()?,
    })
}

fn write_config(w: &mut Writer, c: &TrainConfig) {
    w.usize(c.epochs);
    w.usize(c.batch_size);
    w.f64(c.lr);
    w.u8(match c.schedule {
        LrSchedule::Constant => 0,
        LrSchedule::Cosine => 1,
    });
    w.u8(match c.method {
        Method::GuidedRandom => 0,
        Method::Mirror => 1,
    });
    w.u8(match c.sd_mode {
        SdMode::Regression => 0,
        SdMode::Classification => 1,
    });
    w.u64(c.seed);
    w.u8(c.grad_clip.is_some() as u8);
    w.f64(c.grad_clip.unwrap_or(0.0));
    w.f64(c.alpha);
    w.f64(c.gamma);
    w.u8(c.parallel as u8);
}

fn read_config(r: &mut Reader) -> Result<TrainConfig> {
    let epochs = r.usize()?;
    let batch_size = r.usize()?;
    let lr = r.f64()?;
    let schedule = match r.u8()? {
        0 => LrSchedule::Constant,
        1 => LrSchedule::Cosine,
        _ => return Err(r.err("unknown lr schedule id")),
    };
    let method = match r.u8()? {
        0 => Method::GuidedRandom,
        1 => Method::Mirror,
        _ => return Err(r.err("unknown sampling method id")),
    };
    let sd_mode = match r.u8()? {
        0 => SdMode::Regression,
        1 => SdMode::Classification,
        _ => return Err(r.err("unknown SD mode id")),
    };
    let seed = r.u64()?;
    let has_clip = r.u8()? != 0;
    let clip = r.f64()?;
    Ok(TrainConfig {
        epochs,
        batch_size,
        lr,
        schedule,
        method,
        sd_mode,
        seed,
        grad_clip: has_clip.then_some(clip),
        alpha: r.f64()?,
        gamma: r.f64()?,
        parallel: r.u8()? != 0,
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn err_at(&self, offset: usize, msg: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.to_string(),
        }
    }
    fn err(&self, msg: &str) -> Error {
        self.err_at(self.pos, msg)
    }
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err("size overflow"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if (self.bytes.len() - self.pos) / 8 < n {
            return Err(self.err("unexpected end of file"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let start = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.err_at(start, "name is not UTF-8"))
    }
}
