//! Frame sampling, label scaling, manifests and frame files, the synthetic
//! planted-signal dataset, and padded batch assembly.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::eri_head::ReactionVector;
use crate::error::{Error, Result};
use crate::metrics::NUM_CATEGORIES;

/// One frame is kept from every window of this many.
pub const FRAME_STRIDE: usize = 30;

/// `[0, 30, 60, …]` below `n_total_frames`.
pub fn sample_frame_indices(n_total_frames: usize) -> Result<Vec<usize>> {
    if n_total_frames == 0 {
        return Err(Error::EmptyVideo);
    }
    Ok((0..n_total_frames).step_by(FRAME_STRIDE).collect())
}

/// Number of frames kept from a video of `n_total_frames`.
pub fn sampled_len(n_total_frames: usize) -> usize {
    n_total_frames.div_ceil(FRAME_STRIDE)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LabelNorm {
    /// `(v − 1) / 99`
    #[default]
    MinusOneOver99,
    /// `v / 100`
    Over100,
}

impl LabelNorm {
    pub fn normalize_value(self, v: f64) -> f64 {
        match self {
            LabelNorm::MinusOneOver99 => (v - 1.0) / 99.0,
            LabelNorm::Over100 => v / 100.0,
        }
    }

    pub fn denormalize_value(self, u: f64) -> f64 {
        match self {
            LabelNorm::MinusOneOver99 => u * 99.0 + 1.0,
            LabelNorm::Over100 => u * 100.0,
        }
    }

    pub fn normalize(self, raw: &[f64; NUM_CATEGORIES]) -> Result<ReactionVector> {
        check_raw(raw)?;
        Ok(ReactionVector(raw.map(|v| self.normalize_value(v))))
    }

    pub fn denormalize(self, r: &ReactionVector) -> [f64; NUM_CATEGORIES] {
        r.0.map(|u| self.denormalize_value(u))
    }
}

impl fmt::Display for LabelNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelNorm::MinusOneOver99 => "minus1-over-99",
            LabelNorm::Over100 => "over-100",
        })
    }
}

impl FromStr for LabelNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minus1-over-99" => Ok(LabelNorm::MinusOneOver99),
            "over-100" => Ok(LabelNorm::Over100),
            other => Err(Error::ConfigInvalid(format!(
                "unknown label norm `{other}` (minus1-over-99|over-100)"
            ))),
        }
    }
}

/// `(v − 1) / 99` per component.
pub fn normalize_label(raw: &[f64; NUM_CATEGORIES]) -> Result<ReactionVector> {
    LabelNorm::MinusOneOver99.normalize(raw)
}

pub fn denormalize_label(r: &ReactionVector) -> [f64; NUM_CATEGORIES] {
    LabelNorm::MinusOneOver99.denormalize(r)
}

fn check_raw(raw: &[f64; NUM_CATEGORIES]) -> Result<()> {
    match raw.iter().find(|v| !(1.0..=100.0).contains(*v)) {
        Some(&bad) => Err(Error::LabelOutOfRange {
            value: bad,
            range: "[1, 100]",
        }),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::ConfigInvalid(format!("unknown split `{other}` (train|val|test)"))),
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub video_id: String,
    pub frame_file: String,
    pub n_frames: usize,
    pub adoration: f64,
    pub amusement: f64,
    pub anxiety: f64,
    pub disgust: f64,
    pub empathic_pain: f64,
    pub fear: f64,
    pub surprise: f64,
    pub split: Split,
}

impl ManifestRow {
    pub fn labels(&self) -> [f64; NUM_CATEGORIES] {
        [
            self.adoration,
            self.amusement,
            self.anxiety,
            self.disgust,
            self.empathic_pain,
            self.fear,
            self.surprise,
        ]
    }

    pub fn set_labels(&mut self, l: [f64; NUM_CATEGORIES]) {
        [
            self.adoration,
            self.amusement,
            self.anxiety,
            self.disgust,
            self.empathic_pain,
            self.fear,
            self.surprise,
        ] = l;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory frame files are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.video_id.as_str()) {
                return Err(Error::format("manifest", format!("duplicate video_id `{}`", r.video_id)));
            }
            if r.n_frames == 0 {
                return Err(Error::EmptyVideo);
            }
            check_raw(&r.labels())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        let m = Manifest {
            rows,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn frame_path(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.frame_file)
    }

    /// Loads every video of `split`, reading frame files on the rayon pool.
    /// Output order follows the manifest.
    pub fn load_split(&self, split: Split, norm: LabelNorm) -> Result<Vec<SequenceSample>> {
        let rows: Vec<&ManifestRow> = self.split(split).collect();
        if rows.is_empty() {
            return Err(Error::SplitEmpty(split.to_string()));
        }
        rows.par_iter()
            .map(|row| {
                let frames = read_ftz(&self.frame_path(row))?;
                SequenceSample::new(row, frames, norm)
            })
            .collect()
    }
}

/// One video: its kept frames and labels.
#[derive(Clone, Debug)]
pub struct SequenceSample {
    pub video_id: String,
    /// `[T×C×H×W]`
    pub frames: Tensor,
    pub length: usize,
    pub raw_label: [f64; NUM_CATEGORIES],
    pub norm_label: ReactionVector,
}

impl SequenceSample {
    pub fn new(row: &ManifestRow, frames: Tensor, norm: LabelNorm) -> Result<Self> {
        let t = frames.shape().first().copied().unwrap_or(0);
        if frames.rank() != 4 || t == 0 {
            return Err(Error::format(
                "frame file",
                format!("`{}` has shape {:?}, expected [T×C×H×W]", row.video_id, frames.shape()),
            ));
        }
        if t != sampled_len(row.n_frames) {
            return Err(Error::format(
                "frame file",
                format!(
                    "`{}` holds {t} frames but {} source frames sample to {}",
                    row.video_id,
                    row.n_frames,
                    sampled_len(row.n_frames)
                ),
            ));
        }
        if !frames.is_finite() {
            return Err(Error::format("frame file", format!("`{}` has non-finite values", row.video_id)));
        }
        let raw_label = row.labels();
        Ok(SequenceSample {
            video_id: row.video_id.clone(),
            frames,
            length: t,
            raw_label,
            norm_label: norm.normalize(&raw_label)?,
        })
    }
}

/// A video reduced to per-step feature rows, e.g. extractor descriptors.
#[derive(Clone, Debug)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `[T×D]`
    pub features: Tensor,
    pub target: ReactionVector,
}

/// Something [`make_batches`] can pad and stack.
pub trait Batchable {
    fn id(&self) -> &str;
    /// `[T×…]`, with `T ≥ 1`.
    fn sequence(&self) -> &Tensor;
    fn target(&self) -> [f64; NUM_CATEGORIES];
}

impl Batchable for SequenceSample {
    fn id(&self) -> &str {
        &self.video_id
    }
    fn sequence(&self) -> &Tensor {
        &self.frames
    }
    fn target(&self) -> [f64; NUM_CATEGORIES] {
        self.norm_label.0
    }
}

impl Batchable for FeatureSequence {
    fn id(&self) -> &str {
        &self.video_id
    }
    fn sequence(&self) -> &Tensor {
        &self.features
    }
    fn target(&self) -> [f64; NUM_CATEGORIES] {
        self.target.0
    }
}

/// Sequences stacked and zero-padded to the longest in the batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Positions of the members in the input slice.
    pub indices: Vec<usize>,
    pub video_ids: Vec<String>,
    pub lengths: Vec<usize>,
    /// `[B×T_max×…]`
    pub inputs: Tensor,
    /// `[B×7]`
    pub labels: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.inputs.shape().get(1).copied().unwrap_or(0)
    }

    /// Same members and labels, different inputs.
    pub fn with_inputs(&self, inputs: Tensor) -> Batch {
        Batch {
            indices: self.indices.clone(),
            video_ids: self.video_ids.clone(),
            lengths: self.lengths.clone(),
            inputs,
            labels: self.labels.clone(),
        }
    }

    pub fn label_rows(&self) -> Vec<[f64; NUM_CATEGORIES]> {
        self.labels
            .data()
            .chunks(NUM_CATEGORIES)
            .map(|r| r.try_into().expect("seven columns"))
            .collect()
    }
}

/// Splits `samples` into consecutive batches of `batch_size` (the last may
/// be shorter), optionally shuffling first. Every sample lands in exactly
/// one batch.
///
/// With `for_correlation`, `batch_size < 2` is rejected and the batches are
/// filled evenly instead, sizes differing by at most one. The count is
/// capped at `n / 2` so every batch holds at least two samples; with
/// `batch_size == 2` and an odd `n` one batch therefore holds three.
pub fn make_batches<S: Batchable>(
    samples: &[S],
    batch_size: usize,
    shuffle_seed: Option<u64>,
    for_correlation: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 || (for_correlation && batch_size < 2) {
        return Err(Error::BatchTooSmall {
            what: "batch size",
            got: batch_size,
        });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    if order.is_empty() {
        return Ok(Vec::new());
    }
    let groups: Vec<Vec<usize>> = if for_correlation {
        let k = order.len().div_ceil(batch_size).min((order.len() / 2).max(1));
        let (base, extra) = (order.len() / k, order.len() % k);
        let mut rest = &order[..];
        (0..k)
            .map(|i| {
                let (head, tail) = rest.split_at(base + usize::from(i < extra));
                rest = tail;
                head.to_vec()
            })
            .collect()
    } else {
        order.chunks(batch_size).map(<[usize]>::to_vec).collect()
    };
    groups.into_iter().map(|idx| assemble(samples, idx)).collect()
}

fn assemble<S: Batchable>(samples: &[S], indices: Vec<usize>) -> Result<Batch> {
    let first = samples[indices[0]].sequence();
    let step_shape = first.shape()[1..].to_vec();
    let step_len: usize = step_shape.iter().product();
    let lengths: Vec<usize> = indices.iter().map(|&i| samples[i].sequence().shape()[0]).collect();
    let t_max = lengths.iter().copied().max().unwrap_or(0);
    let b = indices.len();
    let mut data = vec![0.0; b * t_max * step_len];
    let mut labels = Vec::with_capacity(b * NUM_CATEGORIES);
    for (slot, &i) in indices.iter().enumerate() {
        let seq = samples[i].sequence();
        if seq.shape()[1..] != step_shape[..] {
            return Err(Error::shape(
                "make batches",
                format!("`{}` has step shape {:?}, expected {:?}", samples[i].id(), &seq.shape()[1..], step_shape),
            ));
        }
        let start = slot * t_max * step_len;
        data[start..start + seq.numel()].copy_from_slice(seq.data());
        labels.extend_from_slice(&samples[i].target());
    }
    let mut shape = vec![b, t_max];
    shape.extend_from_slice(&step_shape);
    Ok(Batch {
        video_ids: indices.iter().map(|&i| samples[i].id().to_string()).collect(),
        indices,
        lengths,
        inputs: Tensor::from_vec(shape, data)?,
        labels: Tensor::from_vec([b, NUM_CATEGORIES], labels)?,
    })
}

const FTZ_MAGIC: &[u8; 4] = b"FTZ1";

/// Writes `[T×C×H×W]` frames: magic, four u32 LE extents, f32 LE values.
pub fn write_ftz(path: &Path, frames: &Tensor) -> Result<()> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::shape("write frames", format!("expected [T×C×H×W], got {:?}", s)));
    }
    let mut bytes = Vec::with_capacity(20 + 4 * frames.numel());
    bytes.extend_from_slice(FTZ_MAGIC);
    for &d in s {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in frames.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ftz(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != FTZ_MAGIC {
        return Err(Error::format("frame file", format!("{} lacks the FTZ1 header", path.display())));
    }
    let dims: Vec<usize> = bytes[4..20]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != 20 + 4 * n {
        return Err(Error::format(
            "frame file",
            format!("{}: {:?} needs {} payload bytes, found {}", path.display(), dims, 4 * n, bytes.len() - 20),
        ));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::from_vec(dims, data)
}

/// Settings for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_videos: usize,
    /// `(C, H, W)`
    pub frame_dims: (usize, usize, usize),
    pub seed: u64,
    /// 1 gives labels that are an exact function of frame content; lower
    /// values add label noise.
    pub signal_strength: f64,
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_videos: 64,
            frame_dims: (3, 32, 32),
            seed: 7,
            signal_strength: 1.0,
            val_fraction: 0.2,
        }
    }
}

/// Number of latent factors planted in each video.
pub const LATENT_FACTORS: usize = 4;

const MIN_SOURCE_FRAMES: usize = 30;
const MAX_SOURCE_FRAMES: usize = 600;
const PATTERN_AMPLITUDE: f64 = 0.25;
const JITTER: f64 = 0.02;
const NOISE_AMPLITUDE: f64 = 0.01;
const LABEL_SPREAD: f64 = 30.0;
const LABEL_NOISE: f64 = 30.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos < 2 {
            return Err(Error::ConfigInvalid(format!(
                "n_videos must be at least 2, got {}",
                self.n_videos
            )));
        }
        let (c, h, w) = self.frame_dims;
        if c == 0 || h < 2 || w < 2 {
            return Err(Error::ConfigInvalid(format!(
                "frame_dims {c}x{h}x{w} too small (need C ≥ 1, H, W ≥ 2)"
            )));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::ConfigInvalid(format!(
                "signal_strength {} outside [0, 1]",
                self.signal_strength
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::ConfigInvalid(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }

    fn meta(&self) -> String {
        let (c, h, w) = self.frame_dims;
        format!(
            "n_videos={}\nframe_dims={c}x{h}x{w}\nseed={}\nsignal_strength={}\nval_fraction={}\n",
            self.n_videos, self.seed, self.signal_strength, self.val_fraction
        )
    }

    /// Reads back the `dataset.meta` written by [`generate_synthetic`].
    pub fn from_meta(text: &str) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("dataset.meta", format!("line `{line}`")))?;
            let bad = |_| Error::format("dataset.meta", format!("value of `{k}`: `{v}`"));
            match k {
                "n_videos" => cfg.n_videos = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "frame_dims" => cfg.frame_dims = parse_dims(v)?,
                "seed" => cfg.seed = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "signal_strength" => {
                    cfg.signal_strength = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
                }
                "val_fraction" => {
                    cfg.val_fraction = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
                }
                _ => return Err(Error::format("dataset.meta", format!("unknown key `{k}`"))),
            }
        }
        Ok(cfg)
    }
}

/// Parses `CxHxW`.
pub fn parse_dims(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::ConfigInvalid(format!("dimensions `{s}` are not CxHxW")))?;
    match parts[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::ConfigInvalid(format!("dimensions `{s}` are not CxHxW"))),
    }
}

/// The fixed spatial patterns whose per-frame weights carry the signal,
/// each `[C×H×W]`: first-channel level, horizontal ramp, vertical grating,
/// central blob.
fn basis_patterns(c: usize, h: usize, w: usize) -> [Vec<f64>; LATENT_FACTORS] {
    let plane = h * w;
    let mut p: [Vec<f64>; LATENT_FACTORS] = std::array::from_fn(|_| vec![0.0; c * plane]);
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let radius = (h.min(w) as f64 / 4.0).max(1.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            p[0][i] = 1.0;
            p[1][(1 % c) * plane + i] = 2.0 * x as f64 / (w - 1) as f64 - 1.0;
            p[2][(2 % c) * plane + i] = (std::f64::consts::PI * 4.0 * y as f64 / h as f64).sin();
            let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (radius * radius);
            let blob = (-d2).exp();
            for ch in 0..c {
                p[3][ch * plane + i] = blob;
            }
        }
    }
    p
}

/// Least-squares weights of each basis pattern in `frame` (after removing
/// the mid-grey base), i.e. the solution of `G·s = Pᵀ·frame`.
fn pattern_weights(gram_inv: &[[f64; LATENT_FACTORS]; LATENT_FACTORS], basis: &[Vec<f64>; LATENT_FACTORS], frame: &[f64]) -> [f64; LATENT_FACTORS] {
    let mut rhs = [0.0; LATENT_FACTORS];
    for (k, b) in basis.iter().enumerate() {
        rhs[k] = b.iter().zip(frame).map(|(p, v)| p * (v - 0.5)).sum();
    }
    let mut s = [0.0; LATENT_FACTORS];
    for (i, row) in gram_inv.iter().enumerate() {
        s[i] = row.iter().zip(&rhs).map(|(a, b)| a * b).sum();
    }
    s
}

fn gram_inverse(basis: &[Vec<f64>; LATENT_FACTORS]) -> Result<[[f64; LATENT_FACTORS]; LATENT_FACTORS]> {
    const K: usize = LATENT_FACTORS;
    // Gauss-Jordan on [G | I]
    let mut m = [[0.0; 2 * K]; K];
    for i in 0..K {
        for j in 0..K {
            m[i][j] = basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum();
        }
        m[i][K + i] = 1.0;
    }
    for col in 0..K {
        let pivot = (col..K)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .expect("non-empty");
        if m[pivot][col].abs() < 1e-9 {
            return Err(Error::ConfigInvalid(
                "frame_dims too small to separate the planted patterns".into(),
            ));
        }
        m.swap(col, pivot);
        let d = m[col][col];
        for v in m[col].iter_mut() {
            *v /= d;
        }
        for r in 0..K {
            if r != col {
                let f = m[r][col];
                let src = m[col];
                for (v, s) in m[r].iter_mut().zip(src) {
                    *v -= f * s;
                }
            }
        }
    }
    let mut inv = [[0.0; K]; K];
    for i in 0..K {
        inv[i].copy_from_slice(&m[i][K..]);
    }
    Ok(inv)
}

/// The seeded `7×K` map from pattern statistics to label offsets.
fn label_map(seed: u64) -> [[f64; LATENT_FACTORS]; NUM_CATEGORIES] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let scale = 1.0 / (LATENT_FACTORS as f64).sqrt();
    std::array::from_fn(|_| {
        std::array::from_fn(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
    })
}

fn planted_labels(map: &[[f64; LATENT_FACTORS]; NUM_CATEGORIES], stats: &[f64; LATENT_FACTORS]) -> [f64; NUM_CATEGORIES] {
    map.map(|row| {
        let v: f64 = row.iter().zip(stats).map(|(a, s)| a * s).sum();
        50.5 + LABEL_SPREAD * v
    })
}

/// Mean pattern weights over every frame of a `[T×C×H×W]` video.
pub fn pattern_statistics(frames: &Tensor) -> Result<[f64; LATENT_FACTORS]> {
    let s = frames.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::shape("pattern statistics", format!("expected [T×C×H×W], got {:?}", s)));
    }
    let basis = basis_patterns(s[1], s[2], s[3]);
    let gram_inv = gram_inverse(&basis)?;
    Ok(frame_stats(&gram_inv, &basis, frames))
}

/// Bilinear upsampling of a coarse Gaussian grid: smooth per-frame noise.
fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let (gh, gw) = (h.div_ceil(8) + 1, w.div_ceil(8) + 1);
    let grid: Vec<f64> = (0..gh * gw).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 * (gh - 1) as f64 / h.max(2).saturating_sub(1) as f64;
        let (y0, ty) = ((fy.floor() as usize).min(gh - 2), fy - fy.floor().min((gh - 2) as f64));
        for x in 0..w {
            let fx = x as f64 * (gw - 1) as f64 / w.max(2).saturating_sub(1) as f64;
            let (x0, tx) = ((fx.floor() as usize).min(gw - 2), fx - fx.floor().min((gw - 2) as f64));
            let at = |yy: usize, xx: usize| grid[yy * gw + xx];
            out[y * w + x] = at(y0, x0) * (1.0 - ty) * (1.0 - tx)
                + at(y0, x0 + 1) * (1.0 - ty) * tx
                + at(y0 + 1, x0) * ty * (1.0 - tx)
                + at(y0 + 1, x0 + 1) * ty * tx;
        }
    }
    out
}

struct SynthVideo {
    row: ManifestRow,
    frames: Tensor,
}

fn synth_video(cfg: &SynthConfig, basis: &[Vec<f64>; LATENT_FACTORS], index: usize) -> Result<(Tensor, usize)> {
    let (c, h, w) = cfg.frame_dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let n_frames = rng.random_range(MIN_SOURCE_FRAMES..=MAX_SOURCE_FRAMES);
    let t = sampled_len(n_frames);
    let latent: [f64; LATENT_FACTORS] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let plane = h * w;
    let mut data = Vec::with_capacity(t * c * plane);
    for _ in 0..t {
        let weights: [f64; LATENT_FACTORS] = std::array::from_fn(|k| {
            let j: f64 = StandardNormal.sample(&mut rng);
            latent[k] + JITTER * j
        });
        let mut frame = vec![0.5; c * plane];
        for (k, b) in basis.iter().enumerate() {
            let a = PATTERN_AMPLITUDE * weights[k];
            for (v, p) in frame.iter_mut().zip(b) {
                *v += a * p;
            }
        }
        for ch in 0..c {
            let noise = smooth_noise(&mut rng, h, w);
            for (v, n) in frame[ch * plane..(ch + 1) * plane].iter_mut().zip(noise) {
                *v += NOISE_AMPLITUDE * n;
            }
        }
        // stored as f32, so statistics are taken on the rounded values
        data.extend(frame.into_iter().map(|v| v as f32 as f64));
    }
    Ok((Tensor::from_vec([t, c, h, w], data)?, n_frames))
}

/// Summary of a generated dataset.
#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub manifest_path: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub mean_sampled_len: f64,
}

/// Writes a planted-signal dataset into `out_dir`: one `.ftz` per video,
/// `manifest.csv` and `dataset.meta`.
///
/// Each video draws a source frame count in `[30, 600]` and `K` latent
/// weights; its kept frames are mid-grey plus the weighted basis patterns
/// (with per-frame jitter) plus smooth noise. Labels are an affine map of
/// the pattern statistics recomputed from the stored frames, plus Gaussian
/// noise scaled by `1 − signal_strength`, clamped to `[1, 100]`.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let (c, h, w) = cfg.frame_dims;
    let basis = basis_patterns(c, h, w);
    let gram_inv = gram_inverse(&basis)?;
    let map = label_map(cfg.seed);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let n_val = ((cfg.n_videos as f64 * cfg.val_fraction).round() as usize).min(cfg.n_videos - 1);
    let mut order: Vec<usize> = (0..cfg.n_videos).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(u64::MAX - 1);
    order.shuffle(&mut split_rng);
    let val: HashSet<usize> = order[..n_val].iter().copied().collect();

    let videos: Vec<SynthVideo> = (0..cfg.n_videos)
        .into_par_iter()
        .map(|i| {
            let (frames, n_frames) = synth_video(cfg, &basis, i)?;
            let stats = frame_stats(&gram_inv, &basis, &frames);
            let mut labels = planted_labels(&map, &stats);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1abe1);
            rng.set_stream(i as u64);
            for l in labels.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *l = (*l + (1.0 - cfg.signal_strength) * LABEL_NOISE * z).clamp(1.0, 100.0);
            }
            let video_id = format!("vid{i:05}");
            let mut row = ManifestRow {
                frame_file: format!("{video_id}.ftz"),
                video_id,
                n_frames,
                adoration: 0.0,
                amusement: 0.0,
                anxiety: 0.0,
                disgust: 0.0,
                empathic_pain: 0.0,
                fear: 0.0,
                surprise: 0.0,
                split: if val.contains(&i) { Split::Val } else { Split::Train },
            };
            row.set_labels(labels);
            Ok(SynthVideo { row, frames })
        })
        .collect::<Result<_>>()?;

    for v in &videos {
        write_ftz(&out_dir.join(&v.row.frame_file), &v.frames)?;
    }
    let manifest = Manifest {
        rows: videos.iter().map(|v| v.row.clone()).collect(),
        root: out_dir.to_path_buf(),
    };
    let manifest_path = out_dir.join("manifest.csv");
    manifest.save(&manifest_path)?;
    let meta_path = out_dir.join("dataset.meta");
    let mut meta = BufWriter::new(fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?);
    meta.write_all(cfg.meta().as_bytes())
        .and_then(|_| meta.flush())
        .map_err(|e| Error::io(&meta_path, e))?;

    let total: usize = videos.iter().map(|v| v.frames.shape()[0]).sum();
    Ok(SynthSummary {
        manifest_path,
        n_train: cfg.n_videos - n_val,
        n_val,
        mean_sampled_len: total as f64 / cfg.n_videos as f64,
    })
}

fn frame_stats(gram_inv: &[[f64; LATENT_FACTORS]; LATENT_FACTORS], basis: &[Vec<f64>; LATENT_FACTORS], frames: &Tensor) -> [f64; LATENT_FACTORS] {
    let frame_len = basis[0].len();
    let t = frames.shape()[0] as f64;
    let mut acc = [0.0; LATENT_FACTORS];
    for f in frames.data().chunks(frame_len) {
        let w = pattern_weights(gram_inv, basis, f);
        for k in 0..LATENT_FACTORS {
            acc[k] += w[k];
        }
    }
    acc.map(|a| a / t)
}

/// Recomputes every label of a generated dataset from its frame files and
/// returns the largest absolute difference from the manifest. Zero (up to
/// rounding) when the dataset was generated with `signal_strength = 1`.
pub fn planted_signal_residual(dataset_dir: &Path) -> Result<f64> {
    let meta_path = dataset_dir.join("dataset.meta");
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let cfg = SynthConfig::from_meta(&meta)?;
    let manifest = Manifest::load(&dataset_dir.join("manifest.csv"))?;
    let map = label_map(cfg.seed);
    let mut worst: f64 = 0.0;
    for row in &manifest.rows {
        let frames = read_ftz(&manifest.frame_path(row))?;
        let stats = pattern_statistics(&frames)?;
        let expected = planted_labels(&map, &stats).map(|v| v.clamp(1.0, 100.0));
        for (a, b) in expected.iter().zip(row.labels()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}


