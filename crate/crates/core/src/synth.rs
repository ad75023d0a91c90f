//! Phantom echo-like videos with known extrema and ejection fraction.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::encoder::Frame;
use crate::error::{Error, Result};
use crate::sampling::{Kind, VideoRecord};

const SECTOR_LEVEL: f64 = 0.15;
const WALL_LEVEL: f64 = 0.8;
const CAVITY_LEVEL: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub frame_size: usize,
    /// Inclusive ranges.
    pub num_frames: (usize, usize),
    pub fps: (f64, f64),
    pub cycle_length: (usize, usize),
    pub ef: (f64, f64),
    /// Standard deviation of the multiplicative speckle.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            frame_size: 112,
            num_frames: (64, 160),
            fps: (30.0, 60.0),
            cycle_length: (16, 32),
            ef: (25.0, 80.0),
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frame_size < 16 {
            return bad(format!("frame size {} too small", self.frame_size));
        }
        if self.cycle_length.0 < 8 || self.cycle_length.0 > self.cycle_length.1 {
            return bad(format!("cycle length range {:?}", self.cycle_length));
        }
        if self.num_frames.0 > self.num_frames.1 || self.num_frames.0 <= self.cycle_length.1 {
            return bad(format!(
                "frame count range {:?} must exceed the longest cycle {}",
                self.num_frames, self.cycle_length.1
            ));
        }
        if !(self.fps.0 > 0.0 && self.fps.0 <= self.fps.1) {
            return bad(format!("fps range {:?}", self.fps));
        }
        if !(self.ef.0 > 10.0 && self.ef.0 <= self.ef.1 && self.ef.1 < 90.0) {
            return bad(format!("EF range {:?} must lie inside (10, 90)", self.ef));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise level {}", self.noise_level));
        }
        Ok(())
    }
}

/// Ground truth behind a generated video.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    /// Analytic cavity area per frame, in pixels.
    pub areas: Vec<f64>,
    pub edv: f64,
    pub esv: f64,
    pub cycle_length: usize,
    /// Frames from ED to ES within a cycle.
    pub systole_length: usize,
    pub phase_offset: usize,
}

impl PhantomTruth {
    pub fn volume(&self, frame: usize) -> f64 {
        self.areas[frame].powf(1.5)
    }
}

/// Relative position between ED (0) and ES (1) for a cycle phase, with cosine ramps.
fn contraction(phase: usize, systole: usize, cycle: usize) -> f64 {
    if phase <= systole {
        (1.0 - (PI * phase as f64 / systole as f64).cos()) / 2.0
    } else {
        let t = (phase - systole) as f64 / (cycle - systole) as f64;
        (1.0 + (PI * t).cos()) / 2.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    /// Semi-axes along the rotated x and y directions.
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Anti-aliased coverage of the pixel centred at `(x, y)`.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        let rho = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
        if rho < 0.5 {
            return 1.0;
        }
        let grad = ((u / (self.a * self.a)).powi(2) + (v / (self.b * self.b)).powi(2)).sqrt() / rho;
        let dist = (rho - 1.0) / grad;
        (0.5 - dist).clamp(0.0, 1.0)
    }
}

struct Scene {
    size: usize,
    sector: Vec<f64>,
    wall: Vec<f64>,
    cx: f64,
    cy: f64,
    ratio: f64,
    cos: f64,
    sin: f64,
}

impl Scene {
    fn new<R: Rng + ?Sized>(size: usize, ed_area: f64, rng: &mut R) -> Self {
        let s = size as f64;
        let ratio = rng.random_range(1.4..1.9);
        let angle: f64 = rng.random_range(-0.3..0.3);
        let cx = s * 0.5 + rng.random_range(-0.04..0.04) * s;
        let cy = s * 0.55 + rng.random_range(-0.04..0.04) * s;
        let a_ed = (ed_area / (PI * ratio)).sqrt();
        let wall = Ellipse {
            cx,
            cy,
            a: a_ed * 1.45 + 1.5,
            b: a_ed * ratio * 1.25 + 1.5,
            cos: angle.cos(),
            sin: angle.sin(),
        };
        let half_angle = 40f64.to_radians();
        let radius = 0.97 * s;
        let mut sector = vec![0.0; size * size];
        let mut wall_cov = vec![0.0; size * size];
        for r in 0..size {
            for c in 0..size {
                let x = c as f64 + 0.5;
                let y = r as f64 + 0.5;
                let (px, py) = (x - s / 2.0, y);
                let dist = (px * px + py * py).sqrt();
                let theta = px.atan2(py).abs();
                let edge = (radius - dist).min((half_angle - theta) * dist);
                sector[r * size + c] = (edge + 0.5).clamp(0.0, 1.0);
                wall_cov[r * size + c] = wall.coverage(x, y);
            }
        }
        Self {
            size,
            sector,
            wall: wall_cov,
            cx,
            cy,
            ratio,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn cavity(&self, area: f64) -> Ellipse {
        let a = (area / (PI * self.ratio)).sqrt();
        Ellipse {
            cx: self.cx,
            cy: self.cy,
            a,
            b: a * self.ratio,
            cos: self.cos,
            sin: self.sin,
        }
    }

    /// Noise-free intensities in `[0, 1]`.
    fn render(&self, area: f64) -> Vec<f64> {
        let cav = self.cavity(area);
        let n = self.size;
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let i = r * n + c;
                let tissue = SECTOR_LEVEL + self.wall[i] * (WALL_LEVEL - SECTOR_LEVEL);
                let k = cav.coverage(c as f64 + 0.5, r as f64 + 0.5);
                out[i] = self.sector[i] * (tissue * (1.0 - k) + CAVITY_LEVEL * k);
            }
        }
        out
    }
}

/// One phantom video plus its ground truth.
pub fn generate_video<R: Rng + ?Sized>(
    config: &PhantomConfig,
    id: &str,
    rng: &mut R,
) -> Result<(VideoRecord, PhantomTruth)> {
    config.validate()?;
    let n = rng.random_range(config.num_frames.0..=config.num_frames.1);
    let fps = rng.random_range(config.fps.0..=config.fps.1);
    let cycle = rng.random_range(config.cycle_length.0..=config.cycle_length.1);
    let systole = ((cycle as f64 * rng.random_range(0.3..0.4)).round() as usize).clamp(3, cycle - 3);
    let ef = rng.random_range(config.ef.0..=config.ef.1);
    let scale = rng.random_range(0.9..1.1);
    let size = config.frame_size as f64;
    let ed_area = PI * 1.6 * (0.13 * size * scale).powi(2);
    let es_area = ed_area * (1.0 - ef / 100.0).powf(2.0 / 3.0);
    let offset = rng.random_range(0..cycle);

    let areas: Vec<f64> = (0..n)
        .map(|t| {
            let k = contraction((t + offset) % cycle, systole, cycle);
            ed_area + (es_area - ed_area) * k
        })
        .collect();

    // Pick one complete ED/ES pair, in either order.
    let phase = |t: usize| (t + offset) % cycle;
    let mut pairs = Vec::new();
    for t in 0..n {
        if phase(t) == 0 && t + systole < n {
            pairs.push((t, t + systole, Kind::Ed));
        }
        if phase(t) == systole && t + cycle - systole < n {
            pairs.push((t, t + cycle - systole, Kind::Es));
        }
    }
    let (label_a, label_b, kind_a) = pairs[rng.random_range(0..pairs.len())];

    let scene = Scene::new(config.frame_size, ed_area, rng);
    let speckle = Normal::new(1.0, config.noise_level.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let frames = areas
        .iter()
        .map(|&area| {
            let pixels = scene
                .render(area)
                .into_iter()
                .map(|v| {
                    let v = if config.noise_level > 0.0 {
                        v * speckle.sample(rng).max(0.0)
                    } else {
                        v
                    };
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                })
                .collect();
            Frame::new(config.frame_size, config.frame_size, pixels).map(Arc::new)
        })
        .collect::<Result<Vec<_>>>()?;

    let video = VideoRecord {
        id: id.to_string(),
        frames,
        fps,
        label_a,
        label_b,
        kind_a,
        kind_b: kind_a.other(),
        ef_percent: ef,
    };
    let truth = PhantomTruth {
        edv: ed_area.powf(1.5),
        esv: es_area.powf(1.5),
        areas,
        cycle_length: cycle,
        systole_length: systole,
        phase_offset: offset,
    };
    Ok((video, truth))
}

/// `count` videos, each from its own rng stream derived from the config seed.
pub fn generate_dataset(config: &PhantomConfig, count: usize) -> Result<Vec<(VideoRecord, PhantomTruth)>> {
    config.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64 + 1);
            generate_video(config, &format!("phantom_{i:05}"), &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{lvef_from_volumes, EfDivisor};

    /// Cavity area recovered from noise-free pixels: flood fill of sub-wall
    /// intensities from the darkest pixel, each weighted by its coverage.
    fn cavity_area_from_pixels(frame: &Frame) -> f64 {
        let wall = (WALL_LEVEL * 255.0).round() as u8;
        let n = frame.width;
        let start = (0..frame.pixels.len())
            .filter(|&i| {
                let (r, c) = (i / n, i % n);
                r.abs_diff(n * 55 / 100) < n / 8 && c.abs_diff(n / 2) < n / 8
            })
            .min_by_key(|&i| frame.pixels[i])
            .unwrap();
        let mut seen = vec![false; frame.pixels.len()];
        let mut stack = vec![start];
        let mut area = 0.0;
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let p = frame.pixels[i] as f64 / 255.0;
            area += ((WALL_LEVEL - p) / (WALL_LEVEL - CAVITY_LEVEL)).clamp(0.0, 1.0);
            let (r, c) = (i / n, i % n);
            let mut next = vec![];
            if r > 0 { next.push(i - n); }
            if r + 1 < n { next.push(i + n); }
            if c > 0 { next.push(i - 1); }
            if c + 1 < n { next.push(i + 1); }
            for j in next {
                if !seen[j] && frame.pixels[j] < wall {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        area
    }

    fn quiet(size: usize) -> PhantomConfig {
        PhantomConfig {
            frame_size: size,
            noise_level: 0.0,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn ef_matches_volumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = PhantomConfig { ef: (60.0, 60.0), num_frames: (40, 40), ..quiet(32) };
        let (v, t) = generate_video(&cfg, "x", &mut rng).unwrap();
        let ef = lvef_from_volumes(t.edv, t.esv, EfDivisor::Edv).unwrap();
        assert!((ef - 60.0).abs() < 0.1);
        assert_eq!(v.ef_percent, 60.0);
        v.validate().unwrap();
    }

    #[test]
    fn labels_at_area_extrema() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = quiet(112);
        for k in 0..6 {
            let (v, t) = generate_video(&cfg, &format!("{k}"), &mut rng).unwrap();
            let (ed, es) = v.ed_es();
            let max = t.areas.iter().cloned().fold(f64::MIN, f64::max);
            let min = t.areas.iter().cloned().fold(f64::MAX, f64::min);
            assert!((t.areas[ed] - max).abs() < 1e-9);
            assert!((t.areas[es] - min).abs() < 1e-9);
            // pixel-counted cavity area peaks at the labels within the labelled cycle
            let pix: Vec<f64> = v.frames.iter().map(|f| cavity_area_from_pixels(f)).collect();
            let cycle = &pix[v.label_a..=v.label_b];
            let argmax = (0..cycle.len()).max_by(|&a, &b| cycle[a].total_cmp(&cycle[b])).unwrap();
            let argmin = (0..cycle.len()).min_by(|&a, &b| cycle[a].total_cmp(&cycle[b])).unwrap();
            assert_eq!(v.label_a + argmax, ed, "video {k}");
            assert_eq!(v.label_a + argmin, es, "video {k}");
        }
    }

    #[test]
    fn pixel_area_tracks_analytic_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (v, t) = generate_video(&quiet(112), "x", &mut rng).unwrap();
        for (f, a) in v.frames.iter().zip(&t.areas) {
            let got = cavity_area_from_pixels(f);
            assert!((got - a).abs() / a < 0.01, "{got} vs {a}");
        }
    }

    #[test]
    fn ef_from_rendered_areas() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        for k in 0..8 {
            let (v, t) = generate_video(&quiet(112), &format!("{k}"), &mut rng).unwrap();
            let ef = lvef_from_volumes(t.edv, t.esv, EfDivisor::Edv).unwrap();
            assert!((ef - v.ef_percent).abs() < 1e-9);
            let (ed, es) = v.ed_es();
            let a_ed = cavity_area_from_pixels(&v.frames[ed]);
            let a_es = cavity_area_from_pixels(&v.frames[es]);
            let pix = lvef_from_volumes(a_ed.powf(1.5), a_es.powf(1.5), EfDivisor::Edv).unwrap();
            worst = worst.max((pix - v.ef_percent).abs());
        }
        assert!(worst < 0.1, "{worst}");
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = PhantomConfig { frame_size: 32, num_frames: (40, 50), ..PhantomConfig::default() };
        let a = generate_dataset(&cfg, 3).unwrap();
        let b = generate_dataset(&cfg, 3).unwrap();
        for ((va, _), (vb, _)) in a.iter().zip(&b) {
            assert_eq!(va.frames, vb.frames);
            assert_eq!(va.ef_percent, vb.ef_percent);
        }
        assert_ne!(a[0].0.frames, a[1].0.frames);
    }

    #[test]
    fn config_validation() {
        assert!(PhantomConfig::default().validate().is_ok());
        let bad = [
            PhantomConfig { cycle_length: (6, 20), ..Default::default() },
            PhantomConfig { ef: (5.0, 50.0), ..Default::default() },
            PhantomConfig { num_frames: (20, 30), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
