//! Datasets, splits and batch streams.
//!
//! Images are stored channel-planar (`C x H x W`), matching the on-disk
//! CIFAR-10 record layout. Pixel values live in `[0, 1]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng, Tag};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR10_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("image dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} pixels for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value.clamp(0.0, 1.0); height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Raw mutable access. Callers must keep values in `[0, 1]`.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clamp_in_place(&mut self) {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
}

impl LabeledExample {
    pub fn one_hot(&self, class_count: usize) -> Vec<f64> {
        let mut v = vec![0.0; class_count];
        v[self.label] = 1.0;
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<LabeledExample>,
    pub unlabeled: Vec<Image>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labeled.iter().map(|e| e.label).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub examples: Vec<LabeledExample>,
    /// Index of each example in the source dataset's labeled list.
    pub source_indices: Vec<usize>,
    pub class_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub images: Vec<Image>,
    /// Withheld ground truth, used for diagnostics only.
    pub hidden_labels: Vec<Option<usize>>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    load_binary_records(path, CIFAR10_CLASSES)
}

/// Reads CIFAR-style records: one label byte followed by 3072 pixel bytes,
/// channel-planar R, G, B, each plane row-major 32x32.
pub fn load_binary_records(path: impl AsRef<Path>, class_count: usize) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_binary_records(&bytes, class_count)
}

pub fn parse_binary_records(bytes: &[u8], class_count: usize) -> Result<Dataset> {
    let remainder = bytes.len() % CIFAR_RECORD;
    if remainder != 0 {
        return Err(Error::Format {
            offset: (bytes.len() - remainder) as u64,
            message: format!(
                "truncated record: {remainder} trailing bytes, records are {CIFAR_RECORD} bytes"
            ),
        });
    }
    let mut labeled = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= class_count {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD) as u64,
                message: format!("label byte {label} out of range for {class_count} classes"),
            });
        }
        let data = rec[1..].iter().map(|&b| f32::from(b) / 255.0).collect();
        labeled.push(LabeledExample {
            image: Image {
                height: CIFAR_SIDE,
                width: CIFAR_SIDE,
                channels: CIFAR_CHANNELS,
                data,
            },
            label,
        });
    }
    Ok(Dataset {
        labeled,
        unlabeled: Vec::new(),
        class_count,
    })
}

pub fn pixel_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_cifar10_binary(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<()> {
    let mut out = Vec::with_capacity(examples.len() * CIFAR_RECORD);
    for e in examples {
        if e.image.dims() != (CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE) {
            return Err(Error::shape("binary records require 3x32x32 images"));
        }
        let label = u8::try_from(e.label).map_err(|_| Error::shape("label exceeds one byte"))?;
        out.push(label);
        out.extend(e.image.data.iter().map(|&v| pixel_byte(v)));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Parameters of the synthetic template-plus-noise generator.
///
/// Each class owns a fixed template made of a few coloured Gaussian blobs.
/// An instance is its class template shifted by up to `max_shift` pixels,
/// with a random contrast change, a random distractor blob and per-pixel
/// Gaussian noise. All three nuisance amplitudes scale with `noise`, and the
/// shift is independent of it, so `noise = 0, max_shift = 0` reproduces the
/// template exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub per_class: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default)]
    pub noise: f32,
    #[serde(default)]
    pub max_shift: usize,
    /// Number of the three template blobs shared by every class; at 2 the
    /// classes differ in a single blob.
    #[serde(default)]
    pub shared_blobs: usize,
    /// Std of per-pixel Gaussian noise; `0.25 * noise` when absent.
    #[serde(default)]
    pub pixel_noise: Option<f32>,
    /// Mirror each instance left-right with probability 1/2, so that the
    /// horizontal flip of weak augmentation preserves the data distribution
    /// as it does for natural images.
    #[serde(default)]
    pub mirror: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_side() -> usize {
    8
}

fn default_channels() -> usize {
    3
}

#[derive(Clone)]
struct Blob {
    cy: f32,
    cx: f32,
    sigma: f32,
    color: Vec<f32>,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::config("synthetic class_count must be at least 2"));
        }
        if self.shared_blobs > 2 {
            return Err(Error::config("synthetic shared_blobs must be at most 2"));
        }
        if self.per_class == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config("synthetic counts and sizes must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || self.pixel_noise.is_some_and(|p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::config("synthetic noise must be a finite non-negative number"));
        }
        Ok(())
    }

    fn templates(&self) -> Vec<Vec<Blob>> {
        let mut rng = stream(self.seed, Tag::SyntheticTemplate, &[]);
        let side = self.height.min(self.width) as f32;
        let blob = |rng: &mut StreamRng| Blob {
            cy: rng.random_range(0.15..0.85) * self.height as f32,
            cx: rng.random_range(0.15..0.85) * self.width as f32,
            sigma: rng.random_range(0.10..0.22) * side,
            color: (0..self.channels).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        };
        let shared: Vec<Blob> = (0..self.shared_blobs).map(|_| blob(&mut rng)).collect();
        (0..self.class_count)
            .map(|_| {
                let mut t: Vec<Blob> = shared.iter().map(Blob::clone).collect();
                t.extend((self.shared_blobs..3).map(|_| blob(&mut rng)));
                t
            })
            .collect()
    }

    fn render(&self, blobs: &[Blob], dy: f32, dx: f32, gain: f32, img: &mut [f32]) {
        let (h, w) = (self.height, self.width);
        for b in blobs {
            let inv = 1.0 / (2.0 * b.sigma * b.sigma);
            for y in 0..h {
                for x in 0..w {
                    let ry = y as f32 + 0.5 - b.cy - dy;
                    let rx = x as f32 + 0.5 - b.cx - dx;
                    let g = gain * (-(ry * ry + rx * rx) * inv).exp();
                    for (c, &col) in b.color.iter().enumerate() {
                        img[(c * h + y) * w + x] += 0.45 * col * g;
                    }
                }
            }
        }
    }

    fn instance(&self, template: &[Blob], rng: &mut impl Rng) -> Image {
        let (h, w, ch) = (self.height, self.width, self.channels);
        let mut img = vec![0.5f32; h * w * ch];
        let shift = self.max_shift as i64;
        let (dy, dx) = if shift > 0 {
            (
                rng.random_range(-shift..=shift) as f32,
                rng.random_range(-shift..=shift) as f32,
            )
        } else {
            (0.0, 0.0)
        };
        let noise = self.noise;
        let gain = if noise > 0.0 {
            (1.0 + noise * rng.random_range(-0.5f32..0.5)).max(0.0)
        } else {
            1.0
        };
        self.render(template, dy, dx, gain, &mut img);
        if noise > 0.0 {
            let side = h.min(w) as f32;
            let distractor = Blob {
                cy: rng.random_range(0.0..h as f32),
                cx: rng.random_range(0.0..w as f32),
                sigma: rng.random_range(0.10..0.22) * side,
                color: (0..ch).map(|_| noise * rng.random_range(-1.0f32..1.0)).collect(),
            };
            self.render(std::slice::from_ref(&distractor), 0.0, 0.0, 1.0, &mut img);
            let n = Normal::new(0.0f32, self.pixel_noise.unwrap_or(0.25 * noise)).expect("valid normal");
            for v in &mut img {
                *v += n.sample(rng);
            }
        }
        let mut image = Image {
            height: h,
            width: w,
            channels: ch,
            data: img,
        };
        image.clamp_in_place();
        if self.mirror && rng.random_bool(0.5) {
            image = crate::augment::flip_horizontal(&image);
        }
        image
    }

    fn generate(&self, per_class: usize, tag: Tag) -> Result<Vec<LabeledExample>> {
        self.validate()?;
        let templates = self.templates();
        let mut rng = stream(self.seed, tag, &[]);
        let mut out = Vec::with_capacity(per_class * self.class_count);
        for _ in 0..per_class {
            for (label, t) in templates.iter().enumerate() {
                out.push(LabeledExample {
                    image: self.instance(t, &mut rng),
                    label,
                });
            }
        }
        Ok(out)
    }
}

/// Fully labeled synthetic dataset; split it with [`split_labeled`].
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(Dataset {
        labeled: spec.generate(spec.per_class, Tag::SyntheticInstance)?,
        unlabeled: Vec::new(),
        class_count: spec.class_count,
    })
}

/// Held-out examples drawn from the same class templates as
/// [`generate_synthetic_dataset`], from an independent instance stream.
pub fn generate_synthetic_test_set(spec: &SyntheticSpec, per_class: usize) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::config("test per_class must be positive"));
    }
    Ok(Dataset {
        labeled: spec.generate(per_class, Tag::SyntheticTest)?,
        unlabeled: Vec::new(),
        class_count: spec.class_count,
    })
}

/// Chooses `labels_per_class` labeled examples per class uniformly without
/// replacement. Every image of the dataset, the labeled ones included, goes
/// to the unlabeled pool.
pub fn split_labeled(
    dataset: &Dataset,
    labels_per_class: usize,
    seed: u64,
) -> Result<(LabeledSet, UnlabeledSet)> {
    let k = dataset.class_count;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, e) in dataset.labeled.iter().enumerate() {
        if e.label >= k {
            return Err(Error::config(format!("label {} out of range", e.label)));
        }
        by_class[e.label].push(i);
    }
    let mut rng = stream(seed, Tag::Split, &[]);
    let mut chosen = Vec::with_capacity(k * labels_per_class);
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < labels_per_class {
            return Err(Error::config(format!(
                "class {c} has {} examples, {labels_per_class} labels per class requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..labels_per_class]);
    }
    chosen.sort_unstable();
    let labeled = LabeledSet {
        examples: chosen.iter().map(|&i| dataset.labeled[i].clone()).collect(),
        source_indices: chosen,
        class_count: k,
    };
    let mut images: Vec<Image> = dataset.labeled.iter().map(|e| e.image.clone()).collect();
    let mut hidden_labels: Vec<Option<usize>> =
        dataset.labeled.iter().map(|e| Some(e.label)).collect();
    images.extend(dataset.unlabeled.iter().cloned());
    hidden_labels.extend(std::iter::repeat_n(None, dataset.unlabeled.len()));
    Ok((
        labeled,
        UnlabeledSet {
            images,
            hidden_labels,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Remainder {
    /// Each epoch is one pass over a fresh permutation; the final short batch
    /// is emitted.
    Emit,
    /// Epoch permutations are concatenated into one infinite sequence, so
    /// every batch is full.
    Continuous,
}

/// Deterministic, infinite batch stream. The indices of batch `step` depend
/// only on `(seed, step)`.
#[derive(Clone, Debug)]
pub struct BatchStream {
    len: usize,
    batch_size: usize,
    seed: u64,
    tag: Tag,
    remainder: Remainder,
    cached_epoch: Option<(u64, Vec<usize>)>,
    next_step: u64,
}

impl BatchStream {
    pub fn new(
        len: usize,
        batch_size: usize,
        seed: u64,
        tag: Tag,
        remainder: Remainder,
    ) -> Result<Self> {
        if len == 0 {
            return Err(Error::config("cannot stream batches from an empty set"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(Self {
            len,
            batch_size,
            seed,
            tag,
            remainder,
            cached_epoch: None,
            next_step: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.len.div_ceil(self.batch_size) as u64
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        let stale = !matches!(&self.cached_epoch, Some((e, _)) if *e == epoch);
        if stale {
            let mut perm: Vec<usize> = (0..self.len).collect();
            perm.shuffle(&mut stream(self.seed, self.tag, &[epoch]));
            self.cached_epoch = Some((epoch, perm));
        }
        &self.cached_epoch.as_ref().expect("just filled").1
    }

    pub fn batch_at(&mut self, step: u64) -> Vec<usize> {
        match self.remainder {
            Remainder::Emit => {
                let bpe = self.batches_per_epoch();
                let (epoch, b) = (step / bpe, (step % bpe) as usize);
                let start = b * self.batch_size;
                let end = (start + self.batch_size).min(self.len);
                self.permutation(epoch)[start..end].to_vec()
            }
            Remainder::Continuous => {
                let len = self.len as u64;
                let start = step * self.batch_size as u64;
                (start..start + self.batch_size as u64)
                    .map(|p| {
                        let offset = (p % len) as usize;
                        self.permutation(p / len)[offset]
                    })
                    .collect()
            }
        }
    }

    /// Repositions the iterator so the next batch is `step`.
    pub fn seek(&mut self, step: u64) {
        self.next_step = step;
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batch_at(self.next_step);
        self.next_step += 1;
        Some(b)
    }
}
