//! View generation: weak flip, random-policy strong views, and CutMix on top
//! of the weak view.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

const FILL: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakConfig {
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    /// Reflect-pad by `pad` pixels and crop back at a random offset.
    #[serde(default)]
    pub pad_crop: bool,
    #[serde(default = "default_pad")]
    pub pad: usize,
}

fn default_flip_prob() -> f64 {
    0.5
}

fn default_pad() -> usize {
    4
}

impl Default for WeakConfig {
    fn default() -> Self {
        Self {
            flip_prob: default_flip_prob(),
            pad_crop: false,
            pad: default_pad(),
        }
    }
}

pub fn flip_horizontal(image: &Image) -> Image {
    let mut out = image.clone();
    let (c, h, w) = image.dims();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ch, y, x, image.get(ch, y, w - 1 - x));
            }
        }
    }
    out
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

pub fn pad_crop(image: &Image, pad: usize, dy: i64, dx: i64) -> Image {
    let mut out = image.clone();
    let (c, h, w) = image.dims();
    let pad = pad as i64;
    let (dy, dx) = (dy.clamp(-pad, pad), dx.clamp(-pad, pad));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = reflect(y as i64 + dy, h);
                let sx = reflect(x as i64 + dx, w);
                out.set(ch, y, x, image.get(ch, sy, sx));
            }
        }
    }
    out
}

pub fn weak_augment(image: &Image, config: &WeakConfig, rng: &mut impl Rng) -> Image {
    let flip = rng.random_bool(config.flip_prob.clamp(0.0, 1.0));
    let mut out = if flip {
        flip_horizontal(image)
    } else {
        image.clone()
    };
    if config.pad_crop && config.pad > 0 {
        let p = config.pad as i64;
        let dy = rng.random_range(-p..=p);
        let dx = rng.random_range(-p..=p);
        out = pad_crop(&out, config.pad, dy, dx);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongOp {
    Identity,
    AutoContrast,
    Equalize,
    Rotate,
    Solarize,
    Color,
    Posterize,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

impl StrongOp {
    pub const ALL: [StrongOp; 14] = [
        StrongOp::Identity,
        StrongOp::AutoContrast,
        StrongOp::Equalize,
        StrongOp::Rotate,
        StrongOp::Solarize,
        StrongOp::Color,
        StrongOp::Posterize,
        StrongOp::Contrast,
        StrongOp::Brightness,
        StrongOp::Sharpness,
        StrongOp::ShearX,
        StrongOp::ShearY,
        StrongOp::TranslateX,
        StrongOp::TranslateY,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongPolicy {
    #[serde(default = "default_catalog")]
    pub catalog: Vec<StrongOp>,
    #[serde(default = "default_ops")]
    pub ops_per_image: usize,
    /// Magnitudes are integers on a 0..=30 scale, drawn uniformly from
    /// `[magnitude_min, magnitude_max]` per op. Level 10 maps to each op's
    /// full canonical range.
    #[serde(default = "default_mag_min")]
    pub magnitude_min: u32,
    #[serde(default = "default_mag_max")]
    pub magnitude_max: u32,
    /// Cutout side is drawn uniformly from `(0, cutout_fraction]` times the
    /// shorter image side. Zero disables cutout.
    #[serde(default = "default_cutout")]
    pub cutout_fraction: f64,
}

fn default_catalog() -> Vec<StrongOp> {
    StrongOp::ALL.to_vec()
}

fn default_ops() -> usize {
    2
}

fn default_mag_min() -> u32 {
    1
}

fn default_mag_max() -> u32 {
    10
}

fn default_cutout() -> f64 {
    0.5
}

impl Default for StrongPolicy {
    fn default() -> Self {
        Self {
            catalog: default_catalog(),
            ops_per_image: default_ops(),
            magnitude_min: default_mag_min(),
            magnitude_max: default_mag_max(),
            cutout_fraction: default_cutout(),
        }
    }
}

impl StrongPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.magnitude_min > self.magnitude_max || self.magnitude_max > 30 {
            return Err(Error::config(
                "strong policy magnitudes must satisfy min <= max <= 30",
            ));
        }
        if !(0.0..=1.0).contains(&self.cutout_fraction) {
            return Err(Error::config("cutout_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn luminance(image: &Image) -> Vec<f32> {
    let (c, h, w) = image.dims();
    if c < 3 {
        return image.plane(0).to_vec();
    }
    (0..h * w)
        .map(|i| 0.299 * image.plane(0)[i] + 0.587 * image.plane(1)[i] + 0.114 * image.plane(2)[i])
        .collect()
}

fn blend(a: &Image, b: &Image, factor: f32) -> Image {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (y + factor * (x - y)).clamp(0.0, 1.0))
        .collect();
    let (c, h, w) = a.dims();
    Image::new(h, w, c, data).expect("blend keeps shape and range")
}

fn map_pixels(image: &Image, f: impl Fn(f32) -> f32) -> Image {
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = f(*v).clamp(0.0, 1.0);
    }
    out
}

fn auto_contrast(image: &Image) -> Image {
    let mut out = image.clone();
    for c in 0..image.channels() {
        let p = out.plane_mut(c);
        let lo = p.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = p.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            let scale = 1.0 / (hi - lo);
            for v in p.iter_mut() {
                *v = ((*v - lo) * scale).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn equalize(image: &Image) -> Image {
    let mut out = image.clone();
    for c in 0..image.channels() {
        let p = out.plane_mut(c);
        let mut hist = [0usize; 256];
        for &v in p.iter() {
            hist[crate::data::pixel_byte(v) as usize] += 1;
        }
        let total = p.len();
        let first = hist.iter().position(|&n| n > 0).unwrap_or(0);
        if hist[first] == total {
            continue;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (i, &n) in hist.iter().enumerate() {
            acc += n;
            cdf[i] = acc;
        }
        let cdf_min = cdf[first];
        let denom = (total - cdf_min) as f32;
        for v in p.iter_mut() {
            let b = crate::data::pixel_byte(*v) as usize;
            *v = ((cdf[b] - cdf_min) as f32 / denom).clamp(0.0, 1.0);
        }
    }
    out
}

fn box_smooth(image: &Image) -> Image {
    let (c, h, w) = image.dims();
    let mut out = image.clone();
    for ch in 0..c {
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let mut s = 0.0;
                for (oy, ox, wt) in [
                    (0i64, 0i64, 5.0f32),
                    (-1, -1, 1.0),
                    (-1, 0, 1.0),
                    (-1, 1, 1.0),
                    (0, -1, 1.0),
                    (0, 1, 1.0),
                    (1, -1, 1.0),
                    (1, 0, 1.0),
                    (1, 1, 1.0),
                ] {
                    s += wt * image.get(ch, (y as i64 + oy) as usize, (x as i64 + ox) as usize);
                }
                out.set(ch, y, x, s / 13.0);
            }
        }
    }
    out
}

/// Inverse-maps every output pixel through `src(y, x) -> (sy, sx)` with
/// nearest-neighbour sampling and grey fill outside the source.
fn warp(image: &Image, src: impl Fn(f32, f32) -> (f32, f32)) -> Image {
    let (c, h, w) = image.dims();
    let mut out = Image::filled(h, w, c, FILL);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y as f32, x as f32);
            let (iy, ix) = (sy.round(), sx.round());
            if iy >= 0.0 && ix >= 0.0 && (iy as usize) < h && (ix as usize) < w {
                for ch in 0..c {
                    out.set(ch, y, x, image.get(ch, iy as usize, ix as usize));
                }
            }
        }
    }
    out
}

/// Applies one catalog op at `level` in `[0, 1]` (fraction of its canonical
/// range). `sign` is `+1` or `-1` for signed ops.
pub fn apply_op(image: &Image, op: StrongOp, level: f32, sign: f32) -> Image {
    let (_, h, w) = image.dims();
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let factor = (1.0 + sign * 0.9 * level).max(0.0);
    match op {
        StrongOp::Identity => image.clone(),
        StrongOp::AutoContrast => auto_contrast(image),
        StrongOp::Equalize => equalize(image),
        StrongOp::Rotate => {
            let theta = sign * level * 30f32.to_radians();
            let (s, c) = theta.sin_cos();
            warp(image, |y, x| {
                let (ry, rx) = (y - cy, x - cx);
                (cy + c * ry - s * rx, cx + s * ry + c * rx)
            })
        }
        StrongOp::Solarize => {
            let threshold = 1.0 - level.clamp(0.0, 1.0);
            map_pixels(image, |v| if v >= threshold { 1.0 - v } else { v })
        }
        StrongOp::Posterize => {
            let bits = (8.0 - (4.0 * level).round()).clamp(1.0, 8.0) as u32;
            let shift = 8 - bits;
            map_pixels(image, |v| {
                let b = crate::data::pixel_byte(v) >> shift << shift;
                f32::from(b) / 255.0
            })
        }
        StrongOp::Color => {
            let grey = luminance(image);
            let mut g = image.clone();
            for ch in 0..image.channels() {
                g.plane_mut(ch).copy_from_slice(&grey);
            }
            blend(image, &g, factor)
        }
        StrongOp::Contrast => {
            let grey = luminance(image);
            let mean = grey.iter().sum::<f32>() / grey.len() as f32;
            let (c, h, w) = image.dims();
            blend(image, &Image::filled(h, w, c, mean), factor)
        }
        StrongOp::Brightness => {
            let (c, h, w) = image.dims();
            blend(image, &Image::filled(h, w, c, 0.0), factor)
        }
        StrongOp::Sharpness => blend(image, &box_smooth(image), factor),
        StrongOp::ShearX => {
            let k = sign * 0.3 * level;
            warp(image, |y, x| (y, x + k * (y - cy)))
        }
        StrongOp::ShearY => {
            let k = sign * 0.3 * level;
            warp(image, |y, x| (y + k * (x - cx), x))
        }
        StrongOp::TranslateX => {
            let d = (sign * 0.3 * level * w as f32).round();
            warp(image, |y, x| (y, x - d))
        }
        StrongOp::TranslateY => {
            let d = (sign * 0.3 * level * h as f32).round();
            warp(image, |y, x| (y - d, x))
        }
    }
}

pub fn cutout(image: &Image, cy: usize, cx: usize, side: usize) -> Image {
    let (c, h, w) = image.dims();
    let mut out = image.clone();
    let half = side / 2;
    let (y0, y1) = (cy.saturating_sub(half), (cy + side - half).min(h));
    let (x0, x1) = (cx.saturating_sub(half), (cx + side - half).min(w));
    for ch in 0..c {
        for y in y0..y1 {
            for x in x0..x1 {
                out.set(ch, y, x, FILL);
            }
        }
    }
    out
}

pub fn strong_augment(image: &Image, policy: &StrongPolicy, rng: &mut impl Rng) -> Image {
    if policy.catalog.is_empty() {
        return image.clone();
    }
    let mut out = image.clone();
    for _ in 0..policy.ops_per_image {
        let op = *policy.catalog.choose(rng).expect("non-empty catalog");
        let magnitude = rng.random_range(policy.magnitude_min..=policy.magnitude_max);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        out = apply_op(&out, op, magnitude as f32 / 10.0, sign);
    }
    if policy.cutout_fraction > 0.0 {
        let (_, h, w) = out.dims();
        let max_side = policy.cutout_fraction * h.min(w) as f64;
        let side = (rng.random_range(0.0..=1.0) * max_side).round() as usize;
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        out = cutout(&out, cy, cx, side);
    }
    out.clamp_in_place();
    out
}

/// Binary CutMix mask `b_eta`: 1 keeps the pixel of the own image, 0 takes
/// the partner's.
#[derive(Clone, Debug, PartialEq)]
pub struct CutMixMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl CutMixMask {
    /// Mask that is 1 everywhere except the half-open rectangle
    /// `[y0, y1) x [x0, x1)`, clipped to the image.
    pub fn outside_rect(height: usize, width: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Self {
        let mut data = vec![1u8; height * width];
        for y in y0.min(height)..y1.min(height) {
            for x in x0.min(width)..x1.min(width) {
                data[y * width + x] = 0;
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if height == 0 || width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("mask rows must be non-empty and rectangular"));
        }
        if rows.iter().flatten().any(|&v| v > 1) {
            return Err(Error::Domain("mask entries must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    /// Area fraction retained from the own image.
    pub fn mean(&self) -> f64 {
        let ones = self.data.iter().filter(|&&v| v == 1).count();
        ones as f64 / self.data.len() as f64
    }
}

/// Draws a CutMix mask: keep-ratio `lam ~ Beta(alpha, alpha)`, one rectangle
/// of target area `(1 - lam) H W` centred uniformly and clipped to the image.
/// The returned `eta` is the mean of the realised mask.
pub fn sample_cutmix_mask(
    height: usize,
    width: usize,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<(CutMixMask, f64)> {
    if height == 0 || width == 0 {
        return Err(Error::shape("mask dimensions must be positive"));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::config(format!("cutmix alpha {alpha}: {e}")))?;
    let lam: f64 = beta.sample(rng);
    let cut = (1.0 - lam).max(0.0).sqrt();
    let cut_h = (height as f64 * cut).round() as usize;
    let cut_w = (width as f64 * cut).round() as usize;
    let cy = rng.random_range(0..height);
    let cx = rng.random_range(0..width);
    let y0 = cy.saturating_sub(cut_h / 2);
    let x0 = cx.saturating_sub(cut_w / 2);
    let y1 = (cy + cut_h - cut_h / 2).min(height);
    let x1 = (cx + cut_w - cut_w / 2).min(width);
    let mask = CutMixMask::outside_rect(height, width, y0, y1, x0, x1);
    let eta = mask.mean();
    Ok((mask, eta))
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// `x^c_i = b ⊙ x'_i + (1 - b) ⊙ x'_{perm(i)}`, the mask broadcast across
/// channels.
pub fn apply_cutmix(weak: &[Image], permutation: &[usize], masks: &[CutMixMask]) -> Result<Vec<Image>> {
    if permutation.len() != weak.len() || masks.len() != weak.len() {
        return Err(Error::shape("cutmix batch, permutation and masks must agree in length"));
    }
    if !is_permutation(permutation) {
        return Err(Error::shape("cutmix partner indices must be a permutation"));
    }
    weak.iter()
        .zip(permutation)
        .zip(masks)
        .map(|((own, &r), mask)| {
            let partner = &weak[r];
            let (c, h, w) = own.dims();
            if partner.dims() != own.dims() || (mask.height, mask.width) != (h, w) {
                return Err(Error::shape("cutmix images and mask must share H x W"));
            }
            let mut out = own.clone();
            for ch in 0..c {
                let dst = out.plane_mut(ch);
                let src = partner.plane(ch);
                for (i, &m) in mask.data.iter().enumerate() {
                    if m == 0 {
                        dst[i] = src[i];
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

/// `p^c_j = eta m_ij p_ij + (1 - eta) m_rj p_rj`. Mass is lost, not
/// renormalised, when a source is masked out.
pub fn mix_pseudolabels(
    phat_i: &[f64],
    phat_r: &[f64],
    maskrow_i: &[f64],
    maskrow_r: &[f64],
    eta: f64,
) -> Vec<f64> {
    phat_i
        .iter()
        .zip(phat_r)
        .zip(maskrow_i.iter().zip(maskrow_r))
        .map(|((&pi, &pr), (&mi, &mr))| eta * mi * pi + (1.0 - eta) * mr * pr)
        .collect()
}

/// The four views of one unlabeled image plus its CutMix bookkeeping.
#[derive(Clone, Debug)]
pub struct ViewBundle {
    pub weak: Image,
    pub strong1: Image,
    pub strong2: Image,
    pub cutmix: Image,
    pub mask: CutMixMask,
    pub eta: f64,
    pub partner_index: usize,
}
