//! Whole-video inference and scoring.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::heads::{SdOutput, NUM_CLASSES};
use crate::metrics::{extract_indices, ExtractedIndices, MetricsReport, VideoResult};
use crate::model::Model;
use crate::params::ParamStore;
use crate::sampling::{subsample, VideoRecord};

/// Frames encoded per inference call.
const ENCODE_CHUNK: usize = 64;

/// Prediction for a whole (subsampled) video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction {
    pub id: String,
    /// One entry per processed frame.
    pub sd: SdOutput,
    pub ef_percent: f64,
    pub indices: ExtractedIndices,
    pub fps: f64,
    pub subsampled: bool,
}

/// Window start positions covering `n` frames with windows of `w` and stride `w / 2`.
pub fn window_starts(n: usize, w: usize) -> Vec<usize> {
    if n <= w {
        return vec![0];
    }
    let stride = (w / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + w < n).collect();
    starts.push(n - w);
    starts
}

/// Runs the model over a full video. Longer videos are subsampled by two; if
/// still longer than the stack allows, overlapping windows are averaged.
pub fn predict_video(model: &Model, store: &ParamStore, video: &VideoRecord) -> Result<VideoPrediction> {
    let subsampled = video.num_frames() > crate::sampling::SUBSAMPLE_THRESHOLD;
    let v = subsample(video);
    let n = v.num_frames();
    if n < 2 {
        return Err(Error::EmptyInput("predict_video"));
    }
    let mut rows = Vec::with_capacity(n);
    for chunk in v.frames.chunks(ENCODE_CHUNK) {
        let e = model.embed_frames(store, chunk)?;
        rows.extend((0..e.rows()).map(|r| e.row(r).to_vec()));
    }
    let w = model.preset().num_frames();
    let mut signal = vec![0.0; n];
    let mut probs = vec![[0.0; NUM_CLASSES]; n];
    let mut hits = vec![0usize; n];
    let mut ef_sum = 0.0;
    let starts = window_starts(n, w);
    for &s in &starts {
        let len = w.min(n);
        let e = crate::numerics::Tensor::from_rows(&rows[s..s + len])?;
        let p = model.predict_embeddings(store, e, &vec![true; len])?;
        ef_sum += p.ef.0;
        for f in 0..len {
            hits[s + f] += 1;
            match &p.sd {
                SdOutput::Regression(x) => signal[s + f] += x[f],
                SdOutput::Classification(x) => {
                    for c in 0..NUM_CLASSES {
                        probs[s + f][c] += x[f][c];
                    }
                }
            }
        }
    }
    let sd = match model.sd_mode() {
        crate::heads::SdMode::Regression => {
            SdOutput::Regression(signal.iter().zip(&hits).map(|(s, &h)| s / h as f64).collect())
        }
        crate::heads::SdMode::Classification => SdOutput::Classification(
            probs
                .iter()
                .zip(&hits)
                .map(|(p, &h)| p.map(|x| x / h as f64))
                .collect(),
        ),
    };
    let indices = extract_indices(&sd, &vec![true; n])?;
    Ok(VideoPrediction {
        id: v.id.clone(),
        sd,
        ef_percent: ef_sum / starts.len() as f64 * 100.0,
        indices,
        fps: v.fps,
        subsampled,
    })
}

/// Scores a prediction against the labels of `video` (after subsampling).
pub fn score_video(video: &VideoRecord, pred: &VideoPrediction) -> VideoResult {
    let v = subsample(video);
    let (gt_ed, gt_es) = v.ed_es();
    VideoResult {
        id: v.id.clone(),
        gt_es,
        gt_ed,
        indices: pred.indices.clone(),
        ef_pred: pred.ef_percent,
        ef_gt: v.ef_percent,
        fps: v.fps,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub results: Vec<VideoResult>,
    pub report: MetricsReport,
}

pub fn evaluate(model: &Model, store: &ParamStore, videos: &[VideoRecord]) -> Result<Evaluation> {
    let results = videos
        .par_iter()
        .map(|v| Ok(score_video(v, &predict_video(model, store, v)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::from_results(&results)?;
    Ok(Evaluation { results, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_everything() {
        assert_eq!(window_starts(40, 64), vec![0]);
        assert_eq!(window_starts(64, 64), vec![0]);
        assert_eq!(window_starts(100, 64), vec![0, 32, 36]);
        assert_eq!(window_starts(128, 64), vec![0, 32, 64]);
        for n in 65..300 {
            let s = window_starts(n, 64);
            assert_eq!(*s.last().unwrap() + 64, n);
            assert!(s.windows(2).all(|p| p[1] > p[0] && p[1] - p[0] <= 32));
        }
    }
}
