//! Turning labelled variable-length videos into fixed-length training clips.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::encoder::Frame;
use crate::error::{Error, Result};
use crate::heads::{SdMode, CLASS_ED, CLASS_ES, CLASS_TRANSITION};

/// Videos longer than this are temporally subsampled by two.
pub const SUBSAMPLE_THRESHOLD: usize = 128;
/// Range of the context fraction added on each side by guided random sampling.
pub const EXTENSION_RANGE: (f64, f64) = (0.1, 0.7);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Es,
    Ed,
}

impl Kind {
    pub fn class(self) -> usize {
        match self {
            Self::Ed => CLASS_ED,
            Self::Es => CLASS_ES,
        }
    }

    /// Regression target at this extremum.
    pub fn level(self) -> f64 {
        match self {
            Self::Ed => 1.0,
            Self::Es => -1.0,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Self::Ed => Self::Es,
            Self::Es => Self::Ed,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Es => "ES",
            Self::Ed => "ED",
        })
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ES" => Ok(Self::Es),
            "ED" => Ok(Self::Ed),
            other => Err(Error::Validation(format!("unknown extremum kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    GuidedRandom,
    Mirror,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GuidedRandom => "random",
            Self::Mirror => "mirror",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" | "guided" | "guided-random" | "r" => Ok(Self::GuidedRandom),
            "mirror" | "m" => Ok(Self::Mirror),
            other => Err(Error::Config(format!("unknown sampling method `{other}`"))),
        }
    }
}

/// A video with one labelled cycle.
#[derive(Debug, Clone)]
pub struct VideoRecord {
    pub id: String,
    pub frames: Vec<Arc<Frame>>,
    pub fps: f64,
    pub label_a: usize,
    pub label_b: usize,
    pub kind_a: Kind,
    pub kind_b: Kind,
    pub ef_percent: f64,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn gap(&self) -> usize {
        self.label_b - self.label_a
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if !(self.label_a < self.label_b && self.label_b < n) {
            return Err(Error::Validation(format!(
                "{}: labels ({}, {}) invalid for {n} frames",
                self.id, self.label_a, self.label_b
            )));
        }
        if self.kind_a == self.kind_b {
            return Err(Error::Validation(format!(
                "{}: both labelled frames are {}",
                self.id, self.kind_a
            )));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Validation(format!("{}: fps {}", self.id, self.fps)));
        }
        scale_ef(self.ef_percent).map(|_| ())
    }

    /// Index of the labelled ED and ES frame.
    pub fn ed_es(&self) -> (usize, usize) {
        match self.kind_a {
            Kind::Ed => (self.label_a, self.label_b),
            Kind::Es => (self.label_b, self.label_a),
        }
    }

    fn labels(&self) -> LabelPair {
        LabelPair {
            a: self.label_a,
            b: self.label_b,
            kind_a: self.kind_a,
        }
    }
}

/// Open-interval percent to `[0, 1]` target.
pub fn scale_ef(ef_percent: f64) -> Result<f64> {
    if ef_percent > 0.0 && ef_percent < 100.0 {
        Ok(ef_percent / 100.0)
    } else {
        Err(Error::Validation(format!("EF {ef_percent}% outside (0, 100)")))
    }
}

/// Keeps every second frame of videos longer than the threshold.
pub fn subsample(video: &VideoRecord) -> VideoRecord {
    if video.num_frames() <= SUBSAMPLE_THRESHOLD {
        return video.clone();
    }
    VideoRecord {
        frames: video.frames.iter().step_by(2).cloned().collect(),
        fps: video.fps / 2.0,
        label_a: video.label_a / 2,
        label_b: video.label_b / 2,
        ..video.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LabelPair {
    a: usize,
    b: usize,
    kind_a: Kind,
}

#[derive(Debug, Clone)]
pub struct SampledClip {
    pub frames: Vec<Arc<Frame>>,
    pub mask: Vec<bool>,
    /// Original frame index, `None` for padding.
    pub source_indices: Vec<Option<usize>>,
    pub ef_target: f64,
    pub method: Method,
    /// Drawn context fractions (before, after) for guided random clips.
    pub extension: Option<(f64, f64)>,
    labels: LabelPair,
}

/// Per-frame SD targets.
#[derive(Debug, Clone, PartialEq)]
pub enum SdLabels {
    Regression(Vec<f64>),
    /// `None` marks frames excluded from the loss.
    Classification(Vec<Option<usize>>),
}

impl SampledClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn live_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Positions whose source frame is a labelled extremum.
    pub fn extremum_positions(&self) -> Vec<(usize, Kind)> {
        let l = self.labels;
        self.source_indices
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match *s {
                Some(s) if s == l.a => Some((i, l.kind_a)),
                Some(s) if s == l.b => Some((i, l.kind_a.other())),
                _ => None,
            })
            .collect()
    }
}

fn regression_label(l: LabelPair, source: usize) -> f64 {
    let start = l.kind_a.level();
    let end = -start;
    if source <= l.a {
        start
    } else if source >= l.b {
        end
    } else {
        let t = (source - l.a) as f64 / (l.b - l.a) as f64;
        let u = start + (end - start) * t;
        u * u * u
    }
}

fn class_label(l: LabelPair, source: usize) -> usize {
    if source == l.a {
        l.kind_a.class()
    } else if source == l.b {
        l.kind_a.other().class()
    } else {
        CLASS_TRANSITION
    }
}

/// Regression: cubic ramp between the extrema, constant beyond them, 0 on padding.
/// Classification: extremum classes at labelled sources, transition elsewhere.
pub fn make_sd_labels(clip: &SampledClip, mode: SdMode) -> SdLabels {
    let l = clip.labels;
    match mode {
        SdMode::Regression => SdLabels::Regression(
            clip.source_indices
                .iter()
                .map(|s| s.map_or(0.0, |s| regression_label(l, s)))
                .collect(),
        ),
        SdMode::Classification => SdLabels::Classification(
            clip.source_indices.iter().map(|s| s.map(|s| class_label(l, s))).collect(),
        ),
    }
}

fn build_clip(
    video: &VideoRecord,
    sources: Vec<Option<usize>>,
    method: Method,
    extension: Option<(f64, f64)>,
) -> Result<SampledClip> {
    let black = video
        .frames
        .first()
        .map(|f| Arc::new(Frame::black(f.height, f.width)))
        .ok_or(Error::EmptyInput("sample"))?;
    let frames = sources
        .iter()
        .map(|s| s.map_or_else(|| Arc::clone(&black), |s| Arc::clone(&video.frames[s])))
        .collect();
    Ok(SampledClip {
        frames,
        mask: sources.iter().map(Option::is_some).collect(),
        source_indices: sources,
        ef_target: scale_ef(video.ef_percent)?,
        method,
        extension,
        labels: video.labels(),
    })
}

/// Guided random clip with explicit extensions (in frames) before and after the labels.
pub fn guided_random_with_extensions(
    video: &VideoRecord,
    n_frames: usize,
    e_pre: usize,
    e_post: usize,
) -> Result<SampledClip> {
    video.validate()?;
    let (a, b) = (video.label_a, video.label_b);
    if b - a + 1 > n_frames {
        return Err(Error::SampleRejected(format!(
            "{}: labelled span of {} frames exceeds clip length {n_frames}",
            video.id,
            b - a + 1
        )));
    }
    let lo = a.saturating_sub(e_pre);
    let hi = (b + e_post).min(video.num_frames() - 1);
    let span = hi - lo + 1;
    let (start, len) = if span > n_frames {
        let centered = lo + (span - n_frames) / 2;
        (centered.clamp((b + 1).saturating_sub(n_frames), a), n_frames)
    } else {
        (lo, span)
    };
    let sources = (start..start + len)
        .map(Some)
        .chain(std::iter::repeat_n(None, n_frames - len))
        .collect();
    build_clip(video, sources, Method::GuidedRandom, None)
}

/// Labelled frames, everything in between, plus 10 to 70 % of the gap on each side.
pub fn guided_random_sample<R: Rng + ?Sized>(
    video: &VideoRecord,
    n_frames: usize,
    rng: &mut R,
) -> Result<SampledClip> {
    let (lo, hi) = EXTENSION_RANGE;
    let f_pre = rng.random_range(lo..=hi);
    let f_post = rng.random_range(lo..=hi);
    let g = video.gap() as f64;
    let mut clip = guided_random_with_extensions(
        video,
        n_frames,
        (f_pre * g).round() as usize,
        (f_post * g).round() as usize,
    )?;
    clip.extension = Some((f_pre, f_post));
    Ok(clip)
}

/// Reflective tiling of `a..=b` with period `2 (b - a)`: a..b, b-1..a, a+1..b, ...
/// Whole half-cycles are appended until the length exceeds `min_len`.
pub fn mirror_tiling(a: usize, b: usize, min_len: usize) -> Vec<usize> {
    assert!(b > a, "mirror tiling needs a positive gap");
    let g = b - a;
    let mut len = g + 1;
    while len <= min_len {
        len += g;
    }
    (0..len)
        .map(|i| {
            let r = i % (2 * g);
            a + if r <= g { r } else { 2 * g - r }
        })
        .collect()
}

/// Mirror clip cropped at a given offset into the tiling.
pub fn mirror_sample_at(video: &VideoRecord, n_frames: usize, offset: usize) -> Result<SampledClip> {
    video.validate()?;
    let tiling = mirror_tiling(video.label_a, video.label_b, n_frames);
    let max_offset = tiling.len() - n_frames;
    if offset > max_offset {
        return Err(Error::Config(format!(
            "mirror crop offset {offset} exceeds {max_offset}"
        )));
    }
    let sources = tiling[offset..offset + n_frames].iter().map(|&s| Some(s)).collect();
    build_clip(video, sources, Method::Mirror, None)
}

/// Cycle mirrored around its extrema, randomly cropped to `n_frames`.
pub fn mirror_sample<R: Rng + ?Sized>(
    video: &VideoRecord,
    n_frames: usize,
    rng: &mut R,
) -> Result<SampledClip> {
    let tiling_len = mirror_tiling(video.label_a, video.label_b, n_frames).len();
    let offset = rng.random_range(0..=tiling_len - n_frames);
    mirror_sample_at(video, n_frames, offset)
}

pub fn sample_clip<R: Rng + ?Sized>(
    video: &VideoRecord,
    method: Method,
    n_frames: usize,
    rng: &mut R,
) -> Result<SampledClip> {
    match method {
        Method::GuidedRandom => guided_random_sample(video, n_frames, rng),
        Method::Mirror => mirror_sample(video, n_frames, rng),
    }
}
