//! Dataset loading: CIFAR-10 binary batches and a seeded synthetic generator.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation of each channel of an `N×C×H×W` tensor.
    pub fn compute(images: &Tensor) -> Result<Self> {
        let [n, c, h, w] = *images.shape() else {
            return Err(Error::Input(format!("expected N×C×H×W, got {:?}", images.shape())));
        };
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        for (i, p) in images.data().chunks(plane).enumerate() {
            mean[i % c] += p.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for (i, p) in images.data().chunks(plane).enumerate() {
            let m = mean[i % c];
            var[i % c] += p.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, images: &mut Tensor) -> Result<()> {
        let c = images.shape().get(1).copied().unwrap_or(0);
        if images.rank() != 4 || c != self.mean.len() {
            return Err(Error::Input(format!(
                "normalization stats cover {} channels, images are {:?}",
                self.mean.len(),
                images.shape()
            )));
        }
        let plane = images.shape()[2] * images.shape()[3];
        for (i, p) in images.data_mut().chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[i % c], self.std[i % c]);
            p.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(())
    }
}

/// Images with integer labels, before or after standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    /// `N×C×H×W`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Statistics the images were standardized with, if any.
    pub stats: Option<NormStats>,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(LabeledImageSet {
            images,
            labels,
            num_classes,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn per_sample(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Rows `range` as a new set (stats carried over).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > self.len() {
            return Err(Error::Input(format!("empty or out-of-range split {range:?}")));
        }
        let per = self.per_sample();
        let [c, h, w] = self.sample_shape();
        let images = Tensor::new(
            [range.len(), c, h, w],
            self.images.data()[range.start * per..range.end * per].to_vec(),
        )?;
        Ok(LabeledImageSet {
            images,
            labels: self.labels[range].to_vec(),
            num_classes: self.num_classes,
            stats: self.stats.clone(),
        })
    }

    /// Splits off the trailing `fraction` of samples as a held-out set.
    pub fn split_tail(&self, fraction: f64) -> Result<(Self, Self)> {
        let n = self.len();
        let held = ((n as f64) * fraction).round() as usize;
        if held == 0 || held >= n {
            return Err(Error::Config(format!(
                "held-out fraction {fraction} leaves an empty split of {n} samples"
            )));
        }
        Ok((self.slice(0..n - held)?, self.slice(n - held..n)?))
    }

    /// Standardizes in place with the given statistics.
    pub fn normalize_with(&mut self, stats: &NormStats) -> Result<()> {
        stats.apply(&mut self.images)?;
        self.stats = Some(stats.clone());
        Ok(())
    }

    /// Standardizes with statistics computed from this set; returns them.
    pub fn normalize(&mut self) -> Result<NormStats> {
        let stats = NormStats::compute(&self.images)?;
        self.normalize_with(&stats)?;
        Ok(stats)
    }

    /// Copies the samples at `indices` into one `B×C×H×W` batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.per_sample();
        let [c, h, w] = self.sample_shape();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        (Tensor::from_parts(vec![indices.len(), c, h, w], data), labels)
    }
}

/// Reads CIFAR-10 binary batches into `[0, 1]`-scaled images (not standardized).
///
/// With `limit_per_class`, keeps the first `limit` records of each label in file order.
pub fn read_cifar10(paths: &[PathBuf], limit_per_class: Option<usize>) -> Result<LabeledImageSet> {
    if paths.is_empty() {
        return Err(Error::Config("no CIFAR-10 files given".into()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut per_class = [0usize; CIFAR_CLASSES];
    for path in paths {
        let bytes = fs::read(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        if bytes.len() % CIFAR_RECORD_BYTES != 0 {
            let offset = (bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES) as u64;
            return Err(Error::Format {
                offset,
                msg: format!(
                    "{}: {} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
                    path.display(),
                    bytes.len()
                ),
            });
        }
        for (r, rec) in bytes.chunks(CIFAR_RECORD_BYTES).enumerate() {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::Format {
                    offset: (r * CIFAR_RECORD_BYTES) as u64,
                    msg: format!("{}: label byte {label} > 9", path.display()),
                });
            }
            if limit_per_class.is_some_and(|lim| per_class[label] >= lim) {
                continue;
            }
            per_class[label] += 1;
            labels.push(label);
            pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Input("CIFAR-10 files contain no records".into()));
    }
    let n = labels.len();
    LabeledImageSet::new(Tensor::new([n, 3, 32, 32], pixels)?, labels, CIFAR_CLASSES)
}

/// Reads CIFAR-10 batches and standardizes them with their own statistics.
pub fn load_cifar10(paths: &[PathBuf], limit_per_class: Option<usize>) -> Result<LabeledImageSet> {
    let mut set = read_cifar10(paths, limit_per_class)?;
    set.normalize()?;
    Ok(set)
}

/// Writes records in the CIFAR-10 binary layout (label byte, then planar R, G, B).
pub fn write_cifar10(path: &Path, records: &[(u8, Vec<u8>)]) -> Result<()> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_BYTES);
    for (label, px) in records {
        if px.len() != CIFAR_RECORD_BYTES - 1 {
            return Err(Error::Input(format!("record has {} pixel bytes", px.len())));
        }
        out.push(*label);
        out.extend_from_slice(px);
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Parameters of the synthetic image-classification generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    #[serde(default)]
    pub heldout_per_class: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Share of each template's variance that is class-specific; the rest is a pattern common to all classes.
    #[serde(default = "default_class_spread")]
    pub class_spread: f64,
    pub seed: u64,
}

fn default_image_size() -> usize {
    16
}

fn default_channels() -> usize {
    3
}

fn default_class_spread() -> f64 {
    1.0
}

/// Template-to-noise standard deviation ratio.
const SYNTHETIC_SNR: f64 = 3.0;
/// Cosine components per class template and channel.
const TEMPLATE_COMPONENTS: usize = 4;

fn standardize(t: &mut [f64]) {
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let std = (t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64).sqrt();
    t.iter_mut().for_each(|v| *v = (*v - mean) / std.max(1e-12));
}

/// A unit-std sum of low-frequency 2-D cosines per channel.
fn smooth_pattern(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (c, s) = (spec.channels, spec.image_size);
    let tau = std::f64::consts::TAU;
    let mut t = vec![0.0; c * s * s];
    for ch in 0..c {
        for _ in 0..TEMPLATE_COMPONENTS {
            let (fx, fy) = loop {
                let f = (rng.random_range(0..3u32), rng.random_range(0..3u32));
                if f != (0, 0) {
                    break f;
                }
            };
            let amp: f64 = rng.sample(StandardNormal);
            let phase = rng.random::<f64>() * tau;
            for y in 0..s {
                for x in 0..s {
                    let arg = tau * (fx as f64 * x as f64 + fy as f64 * y as f64) / s as f64 + phase;
                    t[(ch * s + y) * s + x] += amp * arg.cos();
                }
            }
        }
    }
    standardize(&mut t);
    t
}

/// Per-class templates mixing a shared pattern with a class-specific one, scaled to unit std.
fn class_templates(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let common = smooth_pattern(spec, rng);
    let (a, b) = ((1.0 - spec.class_spread).sqrt(), spec.class_spread.sqrt());
    (0..spec.classes)
        .map(|_| {
            let own = smooth_pattern(spec, rng);
            let mut t: Vec<f64> = common.iter().zip(&own).map(|(c, o)| a * c + b * o).collect();
            standardize(&mut t);
            t
        })
        .collect()
}

/// Generates `classes × per_class` unstandardized samples, classes interleaved (sample `i` has label `i mod classes`).
pub fn synthetic_samples(spec: &SyntheticSpec, per_class: usize) -> Result<LabeledImageSet> {
    if spec.classes < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {}", spec.classes)));
    }
    if !(spec.class_spread > 0.0 && spec.class_spread <= 1.0) {
        return Err(Error::Config(format!("class_spread must lie in (0, 1], got {}", spec.class_spread)));
    }
    if spec.image_size == 0 || spec.channels == 0 || per_class == 0 {
        return Err(Error::Config("synthetic data needs positive size, channels and samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = class_templates(spec, &mut rng);
    let per = spec.channels * spec.image_size * spec.image_size;
    let n = spec.classes * per_class;
    let noise_std = 1.0 / SYNTHETIC_SNR;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.classes;
        labels.push(k);
        data.extend(
            templates[k]
                .iter()
                .map(|&t| t + noise_std * rng.sample::<f64, _>(StandardNormal)),
        );
    }
    let images = Tensor::new([n, spec.channels, spec.image_size, spec.image_size], data)?;
    LabeledImageSet::new(images, labels, spec.classes)
}

/// Deterministic synthetic set, standardized with its own statistics.
pub fn gen_synthetic(classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<LabeledImageSet> {
    let spec = SyntheticSpec {
        classes,
        train_per_class: per_class,
        heldout_per_class: 0,
        image_size,
        channels: 3,
        class_spread: 1.0,
        seed,
    };
    let mut set = synthetic_samples(&spec, per_class)?;
    set.normalize()?;
    Ok(set)
}

/// Train and held-out synthetic splits sharing templates; both standardized with train statistics.
pub fn gen_synthetic_split(spec: &SyntheticSpec) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if spec.heldout_per_class == 0 {
        return Err(Error::Config("heldout_per_class must be positive".into()));
    }
    let all = synthetic_samples(spec, spec.train_per_class + spec.heldout_per_class)?;
    let n_train = spec.classes * spec.train_per_class;
    let mut train = all.slice(0..n_train)?;
    let mut held = all.slice(n_train..all.len())?;
    let stats = train.normalize()?;
    held.normalize_with(&stats)?;
    Ok((train, held))
}

/// Horizontal flip with probability 1/2 and a random crop from a 4-pixel zero-padded canvas.
pub fn augment_batch<R: Rng + ?Sized>(batch: &mut Tensor, rng: &mut R) {
    const PAD: i64 = 4;
    let [n, c, h, w] = *batch.shape() else { return };
    let per = c * h * w;
    let mut tmp = vec![0.0; per];
    for i in 0..n {
        let flip = rng.random::<bool>();
        let dy = rng.random_range(-PAD..=PAD);
        let dx = rng.random_range(-PAD..=PAD);
        let sample = &mut batch.data_mut()[i * per..(i + 1) * per];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as i64 + dy;
                    let mut sx = x as i64 + dx;
                    let v = if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                        0.0
                    } else {
                        if flip {
                            sx = w as i64 - 1 - sx;
                        }
                        sample[(ch * h + sy as usize) * w + sx as usize]
                    };
                    tmp[(ch * h + y) * w + x] = v;
                }
            }
        }
        sample.copy_from_slice(&tmp);
    }
}
