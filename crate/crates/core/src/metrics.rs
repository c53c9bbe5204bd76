//! Per-chunk quality proxies and the Video Drift Error.
//!
//! VDE of a score series `q_1..q_T` with weights `w_t`:
//!
//! ```text
//! vde = 100 * Σ_{t>=2} w_t |q_t - q_1| / (Σ_{t>=2} w_t |q_1|)
//! ```
//!
//! Weights are uniform by default. [`Weighting::Wmape`] uses
//! `w_t = |q_t| / |q_1|`, which leans on chunks with larger scores.
//!
//! Scorers work on 8-bit grayscale frames:
//!
//! * clarity: variance of the 3x3 Laplacian response over interior pixels,
//!   averaged over frames
//! * motion: mean absolute difference of consecutive frames
//! * aesthetic: mean per-frame intensity standard deviation
//! * background / subject: cosine similarity of 16-bin histograms of the
//!   border / center region against the first chunk

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::frame::GrayFrame;

pub const VDE_EPSILON: f64 = 1e-9;
pub const HISTOGRAM_BINS: usize = 16;
pub const DEFAULT_MARGIN: f64 = 0.25;
pub const TRAIN_FRACTION_NUM: usize = 4;
pub const TRAIN_FRACTION_DEN: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("need at least 2 chunks, got {0}")]
    TooFewChunks(usize),
    #[error("reference score {0} is degenerate (|q_1| < 1e-9)")]
    DegenerateReference(f64),
    #[error("values and weights differ in length")]
    WeightLength,
    #[error("weights must be finite, nonnegative and not all zero")]
    BadWeights,
    #[error("non-finite score")]
    NonFinite,
    #[error("chunk has no frames")]
    EmptyChunk,
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frames differ in shape")]
    ShapeMismatch,
    #[error("region histogram is empty")]
    DegenerateHistogram,
    #[error("chunk_len must be >= 1")]
    ChunkLen,
    #[error("margin must be in [0, 0.5)")]
    Margin,
    #[error("manifest needs at least 5 entries, got {0}")]
    TooFewEntries(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    #[default]
    Uniform,
    Wmape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub metric: String,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(metric: &str, values: Vec<f64>, weighting: Weighting) -> Self {
        let weights = match weighting {
            Weighting::Uniform => vec![1.0; values.len()],
            Weighting::Wmape => {
                let r = values.first().map_or(1.0, |q| libm::fabs(*q));
                values
                    .iter()
                    .map(|q| if r > 0.0 { libm::fabs(*q) / r } else { 0.0 })
                    .collect()
            }
        };
        Self {
            metric: metric.into(),
            values,
            weights,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

pub fn vde(series: &ScoreSeries) -> Result<f64, MetricsError> {
    let q = &series.values;
    let w = &series.weights;
    if q.len() < 2 {
        return Err(MetricsError::TooFewChunks(q.len()));
    }
    if w.len() != q.len() {
        return Err(MetricsError::WeightLength);
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w[1..].iter().all(|x| *x == 0.0) {
        return Err(MetricsError::BadWeights);
    }
    let r = q[0];
    if libm::fabs(r) < VDE_EPSILON {
        return Err(MetricsError::DegenerateReference(r));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (qt, wt) in q[1..].iter().zip(&w[1..]) {
        num += wt * libm::fabs(qt - r);
        den += wt * libm::fabs(r);
    }
    Ok(100.0 * num / den)
}

fn check_shapes(frames: &[GrayFrame]) -> Result<(), MetricsError> {
    let first = frames.first().ok_or(MetricsError::EmptyChunk)?;
    if frames.iter().any(|f| !f.same_shape(first) || f.pixels.len() != f.width * f.height) {
        return Err(MetricsError::ShapeMismatch);
    }
    Ok(())
}

fn mean_var(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut n = 0.0;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for x in xs {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    if n == 0.0 {
        (0.0, 0.0)
    } else {
        (mean, m2 / n)
    }
}

fn laplacian_variance(f: &GrayFrame) -> f64 {
    if f.width < 3 || f.height < 3 {
        return 0.0;
    }
    let px = |x: usize, y: usize| f64::from(f.at(x, y));
    let it = (1..f.height - 1).flat_map(|y| {
        (1..f.width - 1)
            .map(move |x| px(x - 1, y) + px(x + 1, y) + px(x, y - 1) + px(x, y + 1) - 4.0 * px(x, y))
    });
    mean_var(it).1
}

pub fn score_clarity(frames: &[GrayFrame]) -> Result<f64, MetricsError> {
    check_shapes(frames)?;
    Ok(frames.iter().map(laplacian_variance).sum::<f64>() / frames.len() as f64)
}

pub fn score_motion(frames: &[GrayFrame]) -> Result<f64, MetricsError> {
    if frames.len() < 2 {
        return Err(MetricsError::TooFewFrames(frames.len()));
    }
    check_shapes(frames)?;
    let n = frames[0].pixels.len().max(1) as f64;
    let total: f64 = frames
        .windows(2)
        .map(|p| {
            let s: u64 = p[0]
                .pixels
                .iter()
                .zip(&p[1].pixels)
                .map(|(a, b)| u64::from(a.abs_diff(*b)))
                .sum();
            s as f64 / n
        })
        .sum();
    Ok(total / (frames.len() - 1) as f64)
}

pub fn score_aesthetic(frames: &[GrayFrame]) -> Result<f64, MetricsError> {
    check_shapes(frames)?;
    let total: f64 = frames
        .iter()
        .map(|f| libm::sqrt(mean_var(f.pixels.iter().map(|p| f64::from(*p))).1))
        .sum();
    Ok(total / frames.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Border,
    Center,
}

/// Pixel `(x, y)` is in the center iff it lies at least `margin` of each
/// dimension (floored to whole pixels) away from every edge.
pub fn region_histogram(
    frames: &[GrayFrame],
    region: Region,
    margin: f64,
) -> Result<[f64; HISTOGRAM_BINS], MetricsError> {
    check_shapes(frames)?;
    if !(0.0..0.5).contains(&margin) {
        return Err(MetricsError::Margin);
    }
    let (w, h) = (frames[0].width, frames[0].height);
    let mx = libm::floor(w as f64 * margin) as usize;
    let my = libm::floor(h as f64 * margin) as usize;
    let mut hist = [0.0; HISTOGRAM_BINS];
    for f in frames {
        for y in 0..h {
            for x in 0..w {
                let center = x >= mx && x < w - mx && y >= my && y < h - my;
                if center == (region == Region::Center) {
                    hist[usize::from(f.at(x, y)) * HISTOGRAM_BINS / 256] += 1.0;
                }
            }
        }
    }
    Ok(hist)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return Err(MetricsError::DegenerateHistogram);
    }
    Ok(dot / (na * nb))
}

fn region_similarity(
    frames: &[GrayFrame],
    reference: &[GrayFrame],
    region: Region,
    margin: f64,
) -> Result<f64, MetricsError> {
    let a = region_histogram(frames, region, margin)?;
    let b = region_histogram(reference, region, margin)?;
    if !frames[0].same_shape(&reference[0]) {
        return Err(MetricsError::ShapeMismatch);
    }
    cosine(&a, &b)
}

pub fn score_background(frames: &[GrayFrame], reference: &[GrayFrame]) -> Result<f64, MetricsError> {
    region_similarity(frames, reference, Region::Border, DEFAULT_MARGIN)
}

pub fn score_subject(frames: &[GrayFrame], reference: &[GrayFrame]) -> Result<f64, MetricsError> {
    region_similarity(frames, reference, Region::Center, DEFAULT_MARGIN)
}

/// Frames cut into `T = frames / chunk_len` chunks; a trailing partial chunk is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedVideo {
    pub frames: Vec<GrayFrame>,
    pub chunk_len: usize,
}

impl ChunkedVideo {
    pub fn new(frames: Vec<GrayFrame>, chunk_len: usize) -> Result<Self, MetricsError> {
        if chunk_len == 0 {
            return Err(MetricsError::ChunkLen);
        }
        check_shapes(&frames)?;
        Ok(Self { frames, chunk_len })
    }

    pub fn num_chunks(&self) -> usize {
        self.frames.len() / self.chunk_len
    }

    pub fn chunks(&self) -> impl Iterator<Item = &[GrayFrame]> {
        self.frames.chunks_exact(self.chunk_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VdeReport {
    pub chunks: usize,
    pub vde_clarity: f64,
    pub vde_motion: f64,
    pub vde_aesthetic: f64,
    pub vde_background: f64,
    pub vde_subject: f64,
    pub subject_consistency: f64,
    pub background_consistency: f64,
    /// `1 - mean_motion / 255`.
    pub motion_smoothness: f64,
    pub aesthetic_quality: f64,
    /// Mean clarity score.
    pub imaging_quality: f64,
}

impl VdeReport {
    /// `(name, value)` in a fixed order.
    pub fn fields(&self) -> [(&'static str, f64); 10] {
        [
            ("vde_clarity", self.vde_clarity),
            ("vde_motion", self.vde_motion),
            ("vde_aesthetic", self.vde_aesthetic),
            ("vde_background", self.vde_background),
            ("vde_subject", self.vde_subject),
            ("subject_consistency", self.subject_consistency),
            ("background_consistency", self.background_consistency),
            ("motion_smoothness", self.motion_smoothness),
            ("aesthetic_quality", self.aesthetic_quality),
            ("imaging_quality", self.imaging_quality),
        ]
    }
}

/// Score every chunk and reduce each series with [`vde`].
pub fn evaluate(video: &ChunkedVideo, weighting: Weighting) -> Result<VdeReport, MetricsError> {
    let t = video.num_chunks();
    if t < 2 {
        return Err(MetricsError::TooFewChunks(t));
    }
    let reference = video.chunks().next().expect("t >= 2");
    let mut clarity = Vec::with_capacity(t);
    let mut motion = Vec::with_capacity(t);
    let mut aesthetic = Vec::with_capacity(t);
    let mut background = Vec::with_capacity(t);
    let mut subject = Vec::with_capacity(t);
    for c in video.chunks() {
        clarity.push(score_clarity(c)?);
        motion.push(score_motion(c)?);
        aesthetic.push(score_aesthetic(c)?);
        background.push(score_background(c, reference)?);
        subject.push(score_subject(c, reference)?);
    }
    let s = |name: &str, v: Vec<f64>| ScoreSeries::new(name, v, weighting);
    let (clarity, motion, aesthetic) = (s("clarity", clarity), s("motion", motion), s("aesthetic", aesthetic));
    let (background, subject) = (s("background", background), s("subject", subject));
    Ok(VdeReport {
        chunks: t,
        vde_clarity: vde(&clarity)?,
        vde_motion: vde(&motion)?,
        vde_aesthetic: vde(&aesthetic)?,
        vde_background: vde(&background)?,
        vde_subject: vde(&subject)?,
        subject_consistency: subject.mean(),
        background_consistency: background.mean(),
        motion_smoothness: 1.0 - motion.mean() / 255.0,
        aesthetic_quality: aesthetic.mean(),
        imaging_quality: clarity.mean(),
    })
}

/// `radius`-pixel box blur with edge clamping; `radius = 0` copies.
pub fn box_blur(f: &GrayFrame, radius: usize) -> GrayFrame {
    if radius == 0 {
        return f.clone();
    }
    let r = radius as isize;
    let (w, h) = (f.width as isize, f.height as isize);
    GrayFrame::from_fn(f.width, f.height, |x, y| {
        let mut sum = 0u32;
        let mut n = 0u32;
        for dy in -r..=r {
            for dx in -r..=r {
                let xx = (x as isize + dx).clamp(0, w - 1) as usize;
                let yy = (y as isize + dy).clamp(0, h - 1) as usize;
                sum += u32::from(f.at(xx, yy));
                n += 1;
            }
        }
        ((sum + n / 2) / n) as u8
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: String,
    pub class: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

fn split_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Train count for `n` entries: `round(0.8 n)`.
pub fn train_count(n: usize) -> usize {
    (n * TRAIN_FRACTION_NUM + TRAIN_FRACTION_DEN / 2) / TRAIN_FRACTION_DEN
}

/// Assign train/eval per entry, in input order.
///
/// Entries are ordered by `SHA-256(seed_le ‖ id)`, index as tie-break. Each
/// class contributes its first `quota` entries in that order to train, where
/// the quotas are a largest-remainder apportionment of [`train_count`] over
/// the class sizes, so each class keeps its share to within one entry.
pub fn split_manifest(entries: &[ManifestEntry], seed: u64) -> Result<Vec<Split>, MetricsError> {
    let n = entries.len();
    if n < 5 {
        return Err(MetricsError::TooFewEntries(n));
    }
    let mut classes: Vec<(&str, Vec<usize>)> = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        match classes.iter_mut().find(|(c, _)| *c == e.class) {
            Some((_, v)) => v.push(i),
            None => classes.push((&e.class, vec![i])),
        }
    }
    classes.sort_by(|a, b| a.0.cmp(b.0));
    let target = train_count(n);
    // exact quota = size * target / n; floor first, then hand out the remainder
    let mut quotas: Vec<usize> = classes.iter().map(|(_, v)| v.len() * target / n).collect();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by_key(|&c| (core::cmp::Reverse(classes[c].1.len() * target % n), c));
    let short = target - quotas.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        quotas[c] += 1;
    }
    let mut out = vec![Split::Eval; n];
    for ((_, idx), quota) in classes.iter_mut().zip(quotas) {
        idx.sort_by_cached_key(|&i| (split_key(seed, &entries[i].id), i));
        for &i in idx.iter().take(quota) {
            out[i] = Split::Train;
        }
    }
    Ok(out)
}
