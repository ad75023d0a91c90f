//! Training configuration and the `key = value` config file format.

use std::path::Path;

use crate::error::{Error, Result};
use crate::heads::SdMode;
use crate::losses::LossConfig;
use crate::sampling::Method;

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` towards zero over the epoch budget.
    Cosine,
}

impl LrSchedule {
    /// Rate used during epoch `epoch` (0-based) of `total`.
    pub fn rate(self, lr: f64, epoch: usize, total: usize) -> f64 {
        match self {
            Self::Constant => lr,
            Self::Cosine => {
                let t = epoch as f64 / total.max(1) as f64;
                lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown lr schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub method: Method,
    pub sd_mode: SdMode,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub alpha: f64,
    pub gamma: f64,
    /// Run per-sample work of a batch on the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            lr: 1e-4,
            schedule: LrSchedule::Constant,
            method: Method::Mirror,
            sd_mode: SdMode::Regression,
            seed: 0,
            grad_clip: None,
            alpha: 0.7,
            gamma: 0.65,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            sd_mode: self.sd_mode,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c}")));
            }
        }
        self.loss_config().validate()
    }

    /// Sets one field from its textual form. Returns `false` for unknown keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch" | "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "schedule" | "lr_schedule" => self.schedule = value.parse()?,
            "method" => self.method = value.parse()?,
            "sd_mode" | "sd-mode" => self.sd_mode = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "grad_clip" => {
                self.grad_clip = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "alpha" => self.alpha = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "parallel" => self.parallel = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for raw in text.split_inclusive('\n') {
        let line_offset = offset;
        offset += raw.len() as u64;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: line_offset,
                msg: format!("expected `key = value`, got `{line}`"),
            });
        };
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_and_parse() {
        let text = "# run\nepochs = 3\nlr=0.001 # faster\n\nmethod = random\nsd-mode = cla\ngrad_clip = 1.5\n";
        let kv = parse_kv(text, Path::new("x.cfg")).unwrap();
        let mut cfg = TrainConfig::default();
        for (k, v) in &kv {
            assert!(cfg.apply(k, v).unwrap(), "{k}");
        }
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.method, Method::GuidedRandom);
        assert_eq!(cfg.sd_mode, SdMode::Classification);
        assert_eq!(cfg.grad_clip, Some(1.5));
        assert!(cfg.apply("schedule", "cosine").unwrap());
        assert_eq!(cfg.schedule, LrSchedule::Cosine);
        assert!(cfg.validate().is_ok());
        assert!(!cfg.apply("preset", "toy").unwrap());
        assert!(cfg.apply("epochs", "many").is_err());
    }

    #[test]
    fn cosine_schedule() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.rate(0.1, 0, 10), 0.1);
        assert!((s.rate(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(s.rate(0.1, 9, 10) > 0.0);
        assert_eq!(LrSchedule::Constant.rate(0.1, 9, 10), 0.1);
    }

    #[test]
    fn malformed_line_reports_offset() {
        match parse_kv("epochs = 2\nbogus\n", Path::new("c")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 11),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation() {
        let bad = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { lr: f64::NAN, ..Default::default() },
            TrainConfig { gamma: 1.5, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
