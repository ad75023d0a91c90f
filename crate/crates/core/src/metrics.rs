//! Extremum index extraction, frame-distance scoring and EF error metrics.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::heads::{SdOutput, CLASS_ED, CLASS_ES, NUM_CLASSES};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractedIndices {
    pub es: Vec<usize>,
    pub ed: Vec<usize>,
    pub rejected: bool,
}

impl ExtractedIndices {
    fn rejected() -> Self {
        Self {
            rejected: true,
            ..Self::default()
        }
    }
}

/// Maximal runs `[start, end]` (inclusive) of equal keys.
fn runs<K: PartialEq + Copy>(keys: &[K]) -> Vec<(usize, usize, K)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=keys.len() {
        if i == keys.len() || keys[i] != keys[start] {
            out.push((start, i - 1, keys[start]));
            start = i;
        }
    }
    out
}

fn extract_regression(signal: &[f64]) -> ExtractedIndices {
    let positive: Vec<bool> = signal.iter().map(|&v| v > 0.0).collect();
    let runs = runs(&positive);
    // Fewer than two sign changes means no complete cycle.
    if runs.len() < 3 {
        return ExtractedIndices::rejected();
    }
    let mut out = ExtractedIndices::default();
    for (s, e, pos) in runs {
        let seg = &signal[s..=e];
        let mut best = 0;
        for (i, &v) in seg.iter().enumerate() {
            let better = if pos { v > seg[best] } else { v < seg[best] };
            if better {
                best = i;
            }
        }
        if pos {
            out.ed.push(s + best);
        } else {
            out.es.push(s + best);
        }
    }
    out
}

fn extract_classification(probs: &[[f64; NUM_CLASSES]]) -> ExtractedIndices {
    let classes: Vec<usize> = probs
        .iter()
        .map(|p| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if p[c] > p[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    let mut out = ExtractedIndices::default();
    for (s, e, c) in runs(&classes) {
        let center = (s + e) / 2;
        match c {
            CLASS_ED => out.ed.push(center),
            CLASS_ES => out.es.push(center),
            _ => {}
        }
    }
    if out.ed.is_empty() || out.es.is_empty() {
        return ExtractedIndices::rejected();
    }
    out
}

/// ES/ED frame indices from an SD output, restricted to live frames.
///
/// Regression: every sign run is reduced to its extremum (positive runs give ED at
/// the maximum, non-positive runs ES at the minimum, ties toward the earlier frame),
/// provided the signal changes sign at least twice. Classification: centers of
/// maximal ED/ES argmax runs; rejected if either class never wins.
pub fn extract_indices(output: &SdOutput, mask: &[bool]) -> Result<ExtractedIndices> {
    if output.len() != mask.len() {
        return Err(Error::shape("extract_indices", &[output.len()], &[mask.len()]));
    }
    let live: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if live.len() < 2 {
        return Ok(ExtractedIndices::rejected());
    }
    let mut idx = match output {
        SdOutput::Regression(s) => extract_regression(&live.iter().map(|&i| s[i]).collect::<Vec<_>>()),
        SdOutput::Classification(p) => {
            extract_classification(&live.iter().map(|&i| p[i]).collect::<Vec<_>>())
        }
    };
    for v in idx.es.iter_mut().chain(idx.ed.iter_mut()) {
        *v = live[*v];
    }
    Ok(idx)
}

/// Nearest predicted index to `gt` (ties to the lower index) and its distance.
pub fn afd(predicted: &[usize], gt: usize) -> Option<(usize, usize)> {
    predicted
        .iter()
        .map(|&p| (p.abs_diff(gt), p))
        .min()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceStats {
    pub mean: f64,
    /// Population standard deviation of the distances.
    pub std: f64,
    pub median: f64,
    pub count: usize,
}

impl DistanceStats {
    pub fn from_distances(d: &[usize]) -> Option<Self> {
        if d.is_empty() {
            return None;
        }
        let n = d.len() as f64;
        let mean = d.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = d.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = d.to_vec();
        sorted.sort_unstable();
        let m = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[m] as f64
        } else {
            (sorted[m - 1] + sorted[m]) as f64 / 2.0
        };
        Some(Self {
            mean,
            std: var.sqrt(),
            median,
            count: d.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the ground truth has zero variance.
    pub r2: Option<f64>,
}

/// MAE, RMSE and R² over `(pred, gt)` pairs.
pub fn ef_metrics(pairs: &[(f64, f64)]) -> Result<EfMetrics> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("ef_metrics"));
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let ss_res: f64 = pairs.iter().map(|(p, y)| (p - y) * (p - y)).sum();
    let mean_y = pairs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let ss_tot: f64 = pairs.iter().map(|(_, y)| (y - mean_y) * (y - mean_y)).sum();
    let r2 = (pairs.len() >= 2 && ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(EfMetrics {
        mae,
        rmse: (ss_res / n).sqrt(),
        r2,
    })
}

/// Beats per minute from ED spacing.
pub fn heart_rate(ed: &[usize], fps: f64) -> Option<f64> {
    if ed.len() < 2 {
        return None;
    }
    let spacing = (ed[ed.len() - 1] - ed[0]) as f64 / (ed.len() - 1) as f64;
    (spacing > 0.0).then(|| 60.0 * fps / spacing)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EfDivisor {
    #[default]
    Edv,
    Esv,
}

/// `(EDV - ESV) / divisor * 100`
pub fn lvef_from_volumes(edv: f64, esv: f64, divisor: EfDivisor) -> Result<f64> {
    if !(esv > 0.0 && edv > esv && edv.is_finite()) {
        return Err(Error::Validation(format!(
            "volumes must satisfy EDV > ESV > 0, got EDV={edv} ESV={esv}"
        )));
    }
    let d = match divisor {
        EfDivisor::Edv => edv,
        EfDivisor::Esv => esv,
    };
    Ok((edv - esv) / d * 100.0)
}

/// Evaluation outcome for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoResult {
    pub id: String,
    pub gt_es: usize,
    pub gt_ed: usize,
    pub indices: ExtractedIndices,
    pub ef_pred: f64,
    pub ef_gt: f64,
    pub fps: f64,
}

impl VideoResult {
    pub fn es_match(&self) -> Option<(usize, usize)> {
        if self.indices.rejected {
            return None;
        }
        afd(&self.indices.es, self.gt_es)
    }

    pub fn ed_match(&self) -> Option<(usize, usize)> {
        if self.indices.rejected {
            return None;
        }
        afd(&self.indices.ed, self.gt_ed)
    }

    pub fn bpm(&self) -> Option<f64> {
        heart_rate(&self.indices.ed, self.fps)
    }

    pub fn multi_beat(&self) -> bool {
        !self.indices.rejected && (self.indices.es.len() > 1 || self.indices.ed.len() > 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub videos: usize,
    pub afd_es: Option<DistanceStats>,
    pub afd_ed: Option<DistanceStats>,
    pub ef: EfMetrics,
    pub rejected_count: usize,
    pub multi_beat_count: usize,
    pub bpm_mean: Option<f64>,
}

impl MetricsReport {
    /// EF metrics cover every video; rejected videos are left out of aFD only.
    pub fn from_results(results: &[VideoResult]) -> Result<Self> {
        let es: Vec<usize> = results.iter().filter_map(|r| r.es_match().map(|m| m.0)).collect();
        let ed: Vec<usize> = results.iter().filter_map(|r| r.ed_match().map(|m| m.0)).collect();
        let pairs: Vec<(f64, f64)> = results.iter().map(|r| (r.ef_pred, r.ef_gt)).collect();
        let bpms: Vec<f64> = results.iter().filter_map(VideoResult::bpm).collect();
        Ok(Self {
            videos: results.len(),
            afd_es: DistanceStats::from_distances(&es),
            afd_ed: DistanceStats::from_distances(&ed),
            ef: ef_metrics(&pairs)?,
            rejected_count: results.iter().filter(|r| r.indices.rejected).count(),
            multi_beat_count: results.iter().filter(|r| r.multi_beat()).count(),
            bpm_mean: (!bpms.is_empty()).then(|| bpms.iter().sum::<f64>() / bpms.len() as f64),
        })
    }
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn fmt_stats(f: &mut fmt::Formatter<'_>, name: &str, s: Option<DistanceStats>) -> fmt::Result {
    match s {
        Some(s) => writeln!(
            f,
            "aFD {name}: {:.2} ± {:.2} (median {:.1}, n={})",
            s.mean, s.std, s.median, s.count
        ),
        None => writeln!(f, "aFD {name}: n/a"),
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "videos: {}", self.videos)?;
        fmt_stats(f, "ES", self.afd_es)?;
        fmt_stats(f, "ED", self.afd_ed)?;
        writeln!(f, "EF MAE: {:.2}", self.ef.mae)?;
        writeln!(f, "EF RMSE: {:.2}", self.ef.rmse)?;
        match self.ef.r2 {
            Some(r2) => writeln!(f, "EF R2: {r2:.3}")?,
            None => writeln!(f, "EF R2: n/a")?,
        }
        writeln!(f, "rejected: {}", self.rejected_count)?;
        writeln!(f, "multi-beat videos: {}", self.multi_beat_count)?;
        match self.bpm_mean {
            Some(b) => write!(f, "mean heart rate: {b:.1} bpm"),
            None => write!(f, "mean heart rate: n/a"),
        }
    }
}

pub const CSV_HEADER: &str = "id,pred_es,pred_ed,gt_es,gt_ed,afd_es,afd_ed,ef_pred,ef_gt,rejected";

/// One row per video, then a `summary` row holding mean aFD, EF MAE/RMSE in the
/// EF columns and the rejected count.
pub fn write_csv<W: Write>(mut w: W, results: &[VideoResult], report: &MetricsReport) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in results {
        let es = r.es_match();
        let ed = r.ed_match();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{:.4},{:.4},{}",
            r.id,
            opt(es.map(|m| m.1)),
            opt(ed.map(|m| m.1)),
            r.gt_es,
            r.gt_ed,
            opt(es.map(|m| m.0)),
            opt(ed.map(|m| m.0)),
            r.ef_pred,
            r.ef_gt,
            r.indices.rejected
        )?;
    }
    writeln!(
        w,
        "summary,,,,,{},{},{:.4},{:.4},{}",
        opt(report.afd_es.map(|s| format!("{:.4}", s.mean))),
        opt(report.afd_ed.map(|s| format!("{:.4}", s.mean))),
        report.ef.mae,
        report.ef.rmse,
        report.rejected_count
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg(s: Vec<f64>) -> ExtractedIndices {
        let mask = vec![true; s.len()];
        extract_indices(&SdOutput::Regression(s), &mask).unwrap()
    }

    #[test]
    fn sweep_gives_one_ed_and_two_es() {
        // -1 -> +1 -> -1 over 60 frames
        let s: Vec<f64> = (0..60)
            .map(|i| -(2.0 * std::f64::consts::PI * i as f64 / 59.0).cos())
            .collect();
        let got = reg(s.clone());
        assert!(!got.rejected);
        let argmax = (0..60).max_by(|&a, &b| s[a].total_cmp(&s[b]).then(b.cmp(&a))).unwrap();
        assert_eq!(got.ed, vec![argmax]);
        assert_eq!(got.es, vec![0, 59]);
    }

    #[test]
    fn constant_signal_rejected() {
        let got = reg(vec![0.2; 30]);
        assert!(got.rejected && got.es.is_empty() && got.ed.is_empty());
        assert!(reg(vec![-0.5, -0.2, 0.3, 0.9]).rejected);
    }

    #[test]
    fn masked_frames_skipped() {
        let s = vec![-1.0, 1.0, 5.0, -1.0, 0.0];
        let mask = [true, true, false, true, false];
        let got = extract_indices(&SdOutput::Regression(s), &mask).unwrap();
        assert_eq!(got.ed, vec![1]);
        assert_eq!(got.es, vec![0, 3]);
    }

    #[test]
    fn classification_run_centers() {
        let mut p = vec![[0.8, 0.1, 0.1]; 60];
        for f in 10..=12 {
            p[f] = [0.1, 0.1, 0.8];
        }
        for f in 40..=41 {
            p[f] = [0.1, 0.8, 0.1];
        }
        let got = extract_indices(&SdOutput::Classification(p.clone()), &[true; 60]).unwrap();
        assert_eq!(got.es, vec![11]);
        assert_eq!(got.ed, vec![40]);
        for f in 40..=41 {
            p[f] = [0.8, 0.1, 0.1];
        }
        let got = extract_indices(&SdOutput::Classification(p), &[true; 60]).unwrap();
        assert!(got.rejected);
    }

    #[test]
    fn afd_examples() {
        assert_eq!(afd(&[29, 47], 45), Some((2, 47)));
        assert_eq!(afd(&[45], 45), Some((0, 45)));
        assert_eq!(afd(&[518], 129), Some((389, 518)));
        assert_eq!(afd(&[40, 50], 45), Some((5, 40)));
        assert_eq!(afd(&[], 3), None);
    }

    #[test]
    fn ef_metric_examples() {
        let m = ef_metrics(&[(30.0, 30.0), (60.0, 60.0)]).unwrap();
        assert_eq!((m.mae, m.rmse, m.r2), (0.0, 0.0, Some(1.0)));
        let m = ef_metrics(&[(58.24, 56.25)]).unwrap();
        assert!((m.mae - 1.99).abs() < 1e-12);
        let m = ef_metrics(&[(50.0, 60.0), (70.0, 60.0)]).unwrap();
        assert_eq!((m.mae, m.rmse, m.r2), (10.0, 10.0, None));
    }

    #[test]
    fn heart_rate_examples() {
        assert_eq!(heart_rate(&[10, 60, 110], 50.0), Some(60.0));
        assert_eq!(heart_rate(&[0, 120], 25.0), Some(12.5));
        assert_eq!(heart_rate(&[7], 50.0), None);
    }

    #[test]
    fn lvef_examples() {
        assert_eq!(lvef_from_volumes(100.0, 40.0, EfDivisor::Edv).unwrap(), 60.0);
        assert_eq!(lvef_from_volumes(100.0, 40.0, EfDivisor::Esv).unwrap(), 150.0);
        assert!(lvef_from_volumes(50.0, 50.0, EfDivisor::Edv).is_err());
        assert!(lvef_from_volumes(50.0, 0.0, EfDivisor::Edv).is_err());
    }

    #[test]
    fn report_and_csv() {
        let ok = VideoResult {
            id: "a".into(),
            gt_es: 45,
            gt_ed: 20,
            indices: ExtractedIndices { es: vec![29, 47], ed: vec![20, 70], rejected: false },
            ef_pred: 58.24,
            ef_gt: 56.25,
            fps: 50.0,
        };
        let bad = VideoResult {
            id: "b".into(),
            indices: ExtractedIndices::rejected(),
            ef_pred: 40.0,
            ef_gt: 50.0,
            ..ok.clone()
        };
        let rep = MetricsReport::from_results(&[ok.clone(), bad.clone()]).unwrap();
        assert_eq!(rep.rejected_count, 1);
        assert_eq!(rep.afd_es.unwrap().mean, 2.0);
        assert_eq!(rep.afd_ed.unwrap().count, 1);
        assert!((rep.ef.mae - (1.99 + 10.0) / 2.0).abs() < 1e-12);
        assert_eq!(rep.multi_beat_count, 1);
        assert_eq!(rep.bpm_mean, Some(60.0));
        let mut buf = Vec::new();
        write_csv(&mut buf, &[ok, bad], &rep).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "a,47,20,45,20,2,0,58.2400,56.2500,false");
        assert_eq!(lines[2], "b,,,45,20,,,40.0000,50.0000,true");
        assert!(lines[3].starts_with("summary,,,,,2.0000,0.0000,"));
        assert!(rep.to_string().contains("rejected: 1"));
    }

    #[test]
    fn distance_stats() {
        let s = DistanceStats::from_distances(&[1, 3, 5, 7]).unwrap();
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.median, 4.0);
        assert!((s.std - 5f64.sqrt()).abs() < 1e-12);
        assert!(DistanceStats::from_distances(&[]).is_none());
    }
}
